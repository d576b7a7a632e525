// autodiff.h
// Reverse-mode autodiff over Eigen matrices, just big enough for the
// separator network.
//
// Feature maps are C x (H*W) matrices: one column per pixel, pixel index
// y * W + x (frequency-major, same as the spectrogram grids).

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace opensep::nn {

using Mat = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;

  Parameter() = default;
  Parameter(std::string n, Mat v);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape {
 public:
  // With record = false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}

  int constant(Mat v);
  int param(Parameter& p);

  const Mat& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 for a 1x1 node and runs the closures in reverse,
  // accumulating into Parameter::grad.
  void backward(int out);

  // ---- ops ----
  int conv3x3(int x, int h, int w, Parameter& weight, Parameter& bias);  // weight: Cout x 9Cin
  int linear(Parameter& weight, int x);                                  // W x
  int linear(Parameter& weight, int x, Parameter& bias);                 // W x + b
  int add(int a, int b);
  int silu(int x);
  int sigmoid(int x);
  int avgpool2(int x, int h, int w);
  int upsample2(int x, int h, int w);  // nearest
  int concat_rows(int a, int b);
  int layer_norm(int x, Parameter& gain, Parameter& bias);  // over rows, per column
  int instance_norm(int x);  // over columns, per row; no affine part
  // Multi-head scaled dot-product attention. q: d x N, k and v: d x L.
  int attention(int q, int k, int v, int heads);
  int gather_columns(Parameter& table, const std::vector<int>& ids);
  int crop(int x, int h, int w, int h_out, int w_out);
  // mean |m .* scale - target|, m: 1 x N. Returns a 1x1 node.
  int masked_l1(int m, const Mat& scale, const Mat& target);
  // sum_i coeff * x_i over 1x1 nodes.
  int scaled_sum(const std::vector<int>& xs, double coeff);
  // sum(x .* w) for a constant w. Returns a 1x1 node.
  int sum_product(int x, const Mat& w);

 private:
  struct Node {
    Mat value;
    Mat grad;  // empty until something flows back
    Parameter* param = nullptr;
    std::function<void()> back;
  };

  int push(Mat v, std::function<void()> back = {});
  Mat& grad_of(int id);  // allocates zeros on first touch
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace opensep::nn
