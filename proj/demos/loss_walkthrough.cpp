// Computes the span contrastive loss by hand for a tiny batch and prints each
// intermediate quantity next to the library's result.

#include <cmath>
#include <iostream>

#include "spanscl/objective.hpp"

using namespace spanscl;

int main() {
  // Two spans of class "idiom" and one literal span, already unit length.
  Matrix z(3, 2);
  z << 1, 0, 1, 0, 0, 1;
  const std::vector<std::string> labels{"idiom", "idiom", "O"};
  ContrastiveConfig config;
  config.temperature = 1.0;

  const Matrix logits = similarity_logits(z, config.temperature);
  std::cout << "similarity logits:\n" << logits << "\n\n";

  const auto reg = span_contrastive_regular(logits, labels);
  const auto hard = span_contrastive_hard(logits, labels, config.top_k);
  const auto top = topk_hard_negatives(logits, labels, config.top_k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::cout << "anchor " << i << " (" << labels[i] << "): ";
    if (!reg.eligible[i]) {
      std::cout << "no positive in batch, skipped\n";
      continue;
    }
    std::cout << "regular " << format_fixed(reg.loss[i], 4) << ", hard " << format_fixed(hard.loss[i], 4)
              << ", hard negatives {";
    for (std::size_t j = 0; j < top[i].size(); ++j) std::cout << (j ? ", " : "") << top[i][j];
    std::cout << "}\n";
  }

  const double e = std::exp(1.0);
  std::cout << "\nby hand, anchor 0: regular -log(e/(e+1)) = " << format_fixed(-std::log(e / (e + 1)), 4)
            << ", hard -log(e/(e+2)) = " << format_fixed(-std::log(e / (e + 2)), 4) << "\n";

  const auto result = span_contrastive_loss({z, labels, {}}, config);
  std::cout << "span loss (mean over " << result.eligible_anchors << " anchors): " << format_fixed(result.value, 5)
            << "\n";
  std::cout << "total with slot loss 1.0 and lambda 0.5: " << format_fixed(total_loss(1.0, result.value, 0.5), 5)
            << "\n\n";
  std::cout << "gradient w.r.t. span embeddings:\n" << span_contrastive_gradient(z, labels, config) << "\n";
  return 0;
}
