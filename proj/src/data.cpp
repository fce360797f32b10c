#include "advit/data.hpp"

#include <algorithm>
#include <numeric>

#include "advit/rng.hpp"

namespace advit {

void Dataset::validate() const {
  if (images.rank() != 4)
    throw Error("dataset: images must be (N, H, W, C), got " +
                shape_str(images.shape));
  if (static_cast<int>(labels.size()) != images.extent(0))
    throw Error("dataset: label count does not match image count");
  if (num_classes < 2) throw Error("dataset: need at least two classes");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw Error("dataset: label out of range");
  for (double v : images.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw Error("dataset: image values must lie in [0, 1]");
}

Tensor Dataset::image(int index) const {
  if (index < 0 || index >= size())
    throw Error("dataset: image index out of range");
  Tensor out(Shape{height(), width(), channels()});
  const size_t stride = out.data.size();
  std::copy_n(images.data.begin() + index * stride, stride, out.data.begin());
  return out;
}

LabeledBatch make_batch(const Dataset& data, const std::vector<int>& indices) {
  if (indices.empty()) throw Error("make_batch: empty index list");
  const int b = static_cast<int>(indices.size());
  LabeledBatch batch;
  batch.images =
      Tensor(Shape{b, data.height(), data.width(), data.channels()});
  batch.labels = Tensor(Shape{b, data.num_classes}, 0.0);
  const size_t stride = static_cast<size_t>(data.height()) * data.width() *
                        data.channels();
  for (int i = 0; i < b; ++i) {
    const int src = indices[i];
    if (src < 0 || src >= data.size())
      throw Error("make_batch: index out of range");
    std::copy_n(data.images.data.begin() + src * stride, stride,
                batch.images.data.begin() + i * stride);
    batch.labels(i, data.labels[src]) = 1.0;
  }
  return batch;
}

std::vector<std::vector<int>> epoch_batches(int count, int batch_size,
                                            std::uint64_t seed) {
  if (count < 0) throw Error("epoch_batches: negative count");
  if (batch_size < 1) throw Error("epoch_batches: batch size must be >= 1");
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (int at = 0; at < count; at += batch_size) {
    const int end = std::min(count, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

}  // namespace advit
