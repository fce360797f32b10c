#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "advit/tensor.hpp"

namespace advit {

class Tape;

// Handle to a node owned by a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Forward evaluation appends nodes in execution order;
// backward() walks the node list in exact reverse order, so gradient
// accumulation on shared leaves is deterministic and runs are bit-identical
// given the same inputs.
//
// Every op validates shapes up front and checks its output for non-finite
// values; violations raise Error naming the node.
class Tape {
 public:
  // Leaves. Parameters and attack perturbations are leaves with
  // requires_grad=true; constants (images, targets) leave it false.
  Var leaf(Tensor value, bool requires_grad = false, std::string name = "leaf");

  // Elementwise / scalar ops (any rank).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var scale_by(Var a, Var s);  // s holds exactly one element
  Var exp(Var a);
  Var gelu(Var a);  // exact Gaussian-CDF form, not the tanh approximation

  // Matrix ops (rank 2).
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var transpose(Var a);
  Var add_row_vector(Var x, Var bias);    // bias broadcast over rows
  Var scale_columns(Var x, Var gains);    // x * diag(gains)
  Var standardize_rows(Var x, double eps = 1e-12);  // zero mean, unit var
  Var softmax_rows(Var x);
  Var l2_normalize_columns(Var x);  // unit-norm feature columns
  Var slice_rows(Var x, int begin, int end);
  Var slice_columns(Var x, int begin, int end);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_columns(const std::vector<Var>& parts);

  // Shape plumbing and reductions.
  Var reshape(Var a, Shape shape);  // same element count, same order
  Var sum(Var x);                   // -> single element
  Var mean(Var x);                  // -> single element

  // Image ops. Images are (H, W, C); conv kernels (kh, kw, Cin, Cout);
  // depthwise kernels (kh, kw, C).
  Var conv2d(Var image, Var kernel, Var bias, int stride, int pad);
  Var depthwise_conv2d(Var image, Var kernel, Var bias, int pad = 1);
  Var patchify(Var image, int patch);  // -> (N, patch*patch*C)

  // Losses. Targets are constant probability rows; gradients use the
  // closed-form softmax expressions for numerical stability.
  Var cross_entropy(Var logits, Tensor target_probs);       // mean over rows
  Var kl_divergence(Var ref_logits, Var model_logits);      // KL(ref || model)

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& name(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // Seeds the output gradient and propagates to every contributing node.
  // Leaves that do not participate keep an all-zero gradient.
  void backward(Var output);  // output must hold one element; seed = 1
  void backward(Var output, const Tensor& seed);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string name;
    std::function<void(Tape&, const Node&)> backprop;
  };

  Var push(Tensor value, bool requires_grad, std::string name,
           std::function<void(Tape&, const Node&)> backprop);
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor& grad_mut(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  bool wants_grad(int id) const {
    return nodes_[static_cast<size_t>(id)].requires_grad;
  }

  std::vector<Node> nodes_;

  friend struct TapeDetail;
};

// Gradients for a named set of leaves after backward(); missing gradients
// (never seeded) come back as zero tensors of the leaf shape.
std::map<std::string, Tensor> collect_gradients(
    const Tape& tape, const std::map<std::string, Var>& leaves);

}  // namespace advit
