#pragma once

#include <cstdint>
#include <vector>

#include "advit/augment.hpp"
#include "advit/tensor.hpp"

namespace advit {

// Labeled image collection; images (N, H, W, C) with values in [0,1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return images.rank() == 4 ? images.extent(0) : 0; }
  int height() const { return images.extent(1); }
  int width() const { return images.extent(2); }
  int channels() const { return images.extent(3); }
  void validate() const;  // shapes, pixel range, label range

  Tensor image(int index) const;  // one (H, W, C) copy
};

// One-hot batch assembled from the given dataset rows.
LabeledBatch make_batch(const Dataset& data, const std::vector<int>& indices);

// Index order for one epoch: a seeded shuffle chunked into batches; the
// final batch may be smaller.
std::vector<std::vector<int>> epoch_batches(int count, int batch_size,
                                            std::uint64_t seed);

}  // namespace advit
