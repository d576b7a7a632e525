// autodiff.cc

#include "opensep/autodiff.h"

#include <cmath>
#include <cstring>

#include "opensep/errors.h"

namespace opensep::nn {

Parameter::Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
  grad = Mat::Zero(value.rows(), value.cols());
  adam_m = Mat::Zero(value.rows(), value.cols());
  adam_v = Mat::Zero(value.rows(), value.cols());
}

namespace {

// col(k*C + c, p) = x(c, shift_k(p)), zero outside the grid.
void im2col(const Mat& x, int h, int w, Mat& col) {
  const Eigen::Index c = x.rows();
  col.setZero(9 * c, static_cast<Eigen::Index>(h) * w);
  const double* src = x.data();
  double* dst = col.data();
  for (int k = 0; k < 9; ++k) {
    const int dy = k / 3 - 1, dx = k % 3 - 1;
    for (int y = 0; y < h; ++y) {
      const int yy = y + dy;
      if (yy < 0 || yy >= h) continue;
      for (int xx = 0; xx < w; ++xx) {
        const int sx = xx + dx;
        if (sx < 0 || sx >= w) continue;
        const Eigen::Index p = static_cast<Eigen::Index>(y) * w + xx;
        const Eigen::Index s = static_cast<Eigen::Index>(yy) * w + sx;
        std::memcpy(dst + p * 9 * c + k * c, src + s * c, sizeof(double) * c);
      }
    }
  }
}

void col2im_add(const Mat& col, int h, int w, Mat& dx) {
  const Eigen::Index c = dx.rows();
  const double* src = col.data();
  double* dst = dx.data();
  for (int k = 0; k < 9; ++k) {
    const int dy = k / 3 - 1, dxo = k % 3 - 1;
    for (int y = 0; y < h; ++y) {
      const int yy = y + dy;
      if (yy < 0 || yy >= h) continue;
      for (int xx = 0; xx < w; ++xx) {
        const int sx = xx + dxo;
        if (sx < 0 || sx >= w) continue;
        const Eigen::Index p = static_cast<Eigen::Index>(y) * w + xx;
        const Eigen::Index s = static_cast<Eigen::Index>(yy) * w + sx;
        const double* a = src + p * 9 * c + k * c;
        double* b = dst + s * c;
        for (Eigen::Index i = 0; i < c; ++i) b[i] += a[i];
      }
    }
  }
}

double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

int Tape::push(Mat v, std::function<void()> back) {
  Node n;
  n.value = std::move(v);
  if (record_) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_of(int id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

int Tape::constant(Mat v) { return push(std::move(v)); }

int Tape::param(Parameter& p) {
  const int id = push(p.value);
  nodes_[id].param = &p;
  return id;
}

void Tape::backward(int out) {
  if (!record_) throw InvalidInput("backward on a non-recording tape");
  if (nodes_[out].value.size() != 1) throw InvalidInput("backward needs a scalar output");
  grad_of(out)(0, 0) = 1.0;
  for (int i = out; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.back) n.back();
    if (n.param) n.param->grad += n.grad;
  }
}

int Tape::conv3x3(int x, int h, int w, Parameter& weight, Parameter& bias) {
  const Mat& xv = value(x);
  if (xv.cols() != static_cast<Eigen::Index>(h) * w || weight.value.cols() != 9 * xv.rows())
    throw InvalidInput("conv3x3 shape mismatch in " + weight.name);
  Mat col;
  im2col(xv, h, w, col);
  Mat y = weight.value * col;
  y.colwise() += bias.value.col(0);
  const int self = static_cast<int>(nodes_.size());
  Parameter* wp = &weight;
  Parameter* bp = &bias;
  return push(std::move(y), [this, self, x, h, w, wp, bp] {
    const Mat& gy = nodes_[self].grad;
    Mat c;
    im2col(nodes_[x].value, h, w, c);
    wp->grad.noalias() += gy * c.transpose();
    bp->grad.col(0) += gy.rowwise().sum();
    const Mat dcol = wp->value.transpose() * gy;
    col2im_add(dcol, h, w, grad_of(x));
  });
}

int Tape::linear(Parameter& weight, int x) {
  if (weight.value.cols() != value(x).rows()) throw InvalidInput("linear shape mismatch in " + weight.name);
  const int self = static_cast<int>(nodes_.size());
  Parameter* wp = &weight;
  return push(weight.value * value(x), [this, self, x, wp] {
    const Mat& gy = nodes_[self].grad;
    wp->grad.noalias() += gy * nodes_[x].value.transpose();
    grad_of(x).noalias() += wp->value.transpose() * gy;
  });
}

int Tape::linear(Parameter& weight, int x, Parameter& bias) {
  if (weight.value.cols() != value(x).rows()) throw InvalidInput("linear shape mismatch in " + weight.name);
  Mat y = weight.value * value(x);
  y.colwise() += bias.value.col(0);
  const int self = static_cast<int>(nodes_.size());
  Parameter* wp = &weight;
  Parameter* bp = &bias;
  return push(std::move(y), [this, self, x, wp, bp] {
    const Mat& gy = nodes_[self].grad;
    wp->grad.noalias() += gy * nodes_[x].value.transpose();
    bp->grad.col(0) += gy.rowwise().sum();
    grad_of(x).noalias() += wp->value.transpose() * gy;
  });
}

int Tape::add(int a, int b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    throw InvalidInput("add shape mismatch");
  const int self = static_cast<int>(nodes_.size());
  return push(value(a) + value(b), [this, self, a, b] {
    const Mat& gy = nodes_[self].grad;
    grad_of(a) += gy;
    grad_of(b) += gy;
  });
}

int Tape::silu(int x) {
  const Mat& xv = value(x);
  Mat y = xv.unaryExpr([](double v) { return v * sigm(v); });
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x] {
    const Mat& gy = nodes_[self].grad;
    const Mat d = nodes_[x].value.unaryExpr([](double v) {
      const double s = sigm(v);
      return s * (1.0 + v * (1.0 - s));
    });
    grad_of(x) += gy.cwiseProduct(d);
  });
}

int Tape::sigmoid(int x) {
  Mat y = value(x).unaryExpr([](double v) { return sigm(v); });
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x] {
    const Mat& yv = nodes_[self].value;
    grad_of(x) += nodes_[self].grad.cwiseProduct(yv.cwiseProduct((1.0 - yv.array()).matrix()));
  });
}

int Tape::avgpool2(int x, int h, int w) {
  if (h % 2 || w % 2) throw InvalidInput("avgpool2 needs even height and width");
  const Mat& xv = value(x);
  const int ho = h / 2, wo = w / 2;
  Mat y(xv.rows(), static_cast<Eigen::Index>(ho) * wo);
  for (int yy = 0; yy < ho; ++yy)
    for (int xx = 0; xx < wo; ++xx) {
      const Eigen::Index p = static_cast<Eigen::Index>(2 * yy) * w + 2 * xx;
      y.col(static_cast<Eigen::Index>(yy) * wo + xx) =
          0.25 * (xv.col(p) + xv.col(p + 1) + xv.col(p + w) + xv.col(p + w + 1));
    }
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x, h, w] {
    const Mat& gy = nodes_[self].grad;
    Mat& gx = grad_of(x);
    const int ho = h / 2, wo = w / 2;
    for (int yy = 0; yy < ho; ++yy)
      for (int xx = 0; xx < wo; ++xx) {
        const Eigen::Index p = static_cast<Eigen::Index>(2 * yy) * w + 2 * xx;
        const auto g = 0.25 * gy.col(static_cast<Eigen::Index>(yy) * wo + xx);
        gx.col(p) += g;
        gx.col(p + 1) += g;
        gx.col(p + w) += g;
        gx.col(p + w + 1) += g;
      }
  });
}

int Tape::upsample2(int x, int h, int w) {
  const Mat& xv = value(x);
  const int ho = 2 * h, wo = 2 * w;
  Mat y(xv.rows(), static_cast<Eigen::Index>(ho) * wo);
  for (int yy = 0; yy < ho; ++yy)
    for (int xx = 0; xx < wo; ++xx)
      y.col(static_cast<Eigen::Index>(yy) * wo + xx) = xv.col(static_cast<Eigen::Index>(yy / 2) * w + xx / 2);
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x, h, w] {
    const Mat& gy = nodes_[self].grad;
    Mat& gx = grad_of(x);
    const int ho = 2 * h, wo = 2 * w;
    for (int yy = 0; yy < ho; ++yy)
      for (int xx = 0; xx < wo; ++xx)
        gx.col(static_cast<Eigen::Index>(yy / 2) * w + xx / 2) += gy.col(static_cast<Eigen::Index>(yy) * wo + xx);
  });
}

int Tape::concat_rows(int a, int b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  if (av.cols() != bv.cols()) throw InvalidInput("concat_rows column mismatch");
  Mat y(av.rows() + bv.rows(), av.cols());
  y.topRows(av.rows()) = av;
  y.bottomRows(bv.rows()) = bv;
  const int self = static_cast<int>(nodes_.size());
  const Eigen::Index ra = av.rows(), rb = bv.rows();
  return push(std::move(y), [this, self, a, b, ra, rb] {
    const Mat& gy = nodes_[self].grad;
    grad_of(a) += gy.topRows(ra);
    grad_of(b) += gy.bottomRows(rb);
  });
}

int Tape::layer_norm(int x, Parameter& gain, Parameter& bias) {
  constexpr double kEps = 1e-5;
  const Mat& xv = value(x);
  const Eigen::Index c = xv.rows();
  const Eigen::RowVectorXd mean = xv.colwise().mean();
  const Mat centered = xv.rowwise() - mean;
  const Eigen::RowVectorXd inv_std =
      ((centered.array().square().colwise().sum() / static_cast<double>(c)) + kEps).sqrt().inverse();
  Mat xhat = centered.array().rowwise() * inv_std.array();
  Mat y = (xhat.array().colwise() * gain.value.col(0).array()).matrix();
  y.colwise() += bias.value.col(0);
  const int self = static_cast<int>(nodes_.size());
  Parameter* gp = &gain;
  Parameter* bp = &bias;
  return push(std::move(y), [this, self, x, xhat = std::move(xhat), inv_std, gp, bp, c] {
    const Mat& gy = nodes_[self].grad;
    gp->grad.col(0) += gy.cwiseProduct(xhat).rowwise().sum();
    bp->grad.col(0) += gy.rowwise().sum();
    const Mat dxhat = (gy.array().colwise() * gp->value.col(0).array()).matrix();
    const Eigen::RowVectorXd m1 = dxhat.colwise().sum() / static_cast<double>(c);
    const Eigen::RowVectorXd m2 = dxhat.cwiseProduct(xhat).colwise().sum() / static_cast<double>(c);
    Mat dx = dxhat.rowwise() - m1;
    dx -= (xhat.array().rowwise() * m2.array()).matrix();
    grad_of(x) += (dx.array().rowwise() * inv_std.array()).matrix();
  });
}

int Tape::instance_norm(int x) {
  constexpr double kEps = 1e-5;
  const Mat& xv = value(x);
  const double n = static_cast<double>(xv.cols());
  const Eigen::VectorXd mean = xv.rowwise().mean();
  const Mat centered = xv.colwise() - mean;
  const Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / n) + kEps).sqrt().inverse();
  Mat y = (centered.array().colwise() * inv_std.array()).matrix();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x, inv_std, n] {
    const Mat& gy = nodes_[self].grad;
    const Mat& yv = nodes_[self].value;
    const Eigen::VectorXd m1 = gy.rowwise().sum() / n;
    const Eigen::VectorXd m2 = gy.cwiseProduct(yv).rowwise().sum() / n;
    Mat dx = gy.colwise() - m1;
    dx -= (yv.array().colwise() * m2.array()).matrix();
    grad_of(x) += (dx.array().colwise() * inv_std.array()).matrix();
  });
}

int Tape::attention(int q, int k, int v, int heads) {
  const Mat& qv = value(q);
  const Mat& kv = value(k);
  const Mat& vv = value(v);
  const Eigen::Index d = qv.rows();
  if (kv.rows() != d || vv.rows() != d || kv.cols() != vv.cols() || heads < 1 || d % heads)
    throw InvalidInput("attention shape mismatch");
  const Eigen::Index dh = d / heads, n = qv.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Mat> probs(heads);
  Mat out(d, n);
  for (int hd = 0; hd < heads; ++hd) {
    Mat s = scale * qv.middleRows(hd * dh, dh).transpose() * kv.middleRows(hd * dh, dh);  // n x L
    const Eigen::VectorXd mx = s.rowwise().maxCoeff();
    s = (s.colwise() - mx).array().exp().matrix();
    const Eigen::VectorXd sum = s.rowwise().sum();
    s = (s.array().colwise() / sum.array()).matrix();
    out.middleRows(hd * dh, dh).noalias() = vv.middleRows(hd * dh, dh) * s.transpose();
    probs[hd] = std::move(s);
  }
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), [this, self, q, k, v, heads, dh, scale, probs = std::move(probs)] {
    const Mat& gy = nodes_[self].grad;
    Mat& gq = grad_of(q);
    Mat& gk = grad_of(k);
    Mat& gv = grad_of(v);
    const Mat& qv = nodes_[q].value;
    const Mat& kv = nodes_[k].value;
    const Mat& vv = nodes_[v].value;
    for (int hd = 0; hd < heads; ++hd) {
      const Mat& a = probs[hd];
      const auto go = gy.middleRows(hd * dh, dh);
      gv.middleRows(hd * dh, dh).noalias() += go * a;
      const Mat da = go.transpose() * vv.middleRows(hd * dh, dh);  // n x L
      const Eigen::VectorXd dot = da.cwiseProduct(a).rowwise().sum();
      const Mat ds = (a.array() * (da.colwise() - dot).array()).matrix() * scale;
      gq.middleRows(hd * dh, dh).noalias() += kv.middleRows(hd * dh, dh) * ds.transpose();
      gk.middleRows(hd * dh, dh).noalias() += qv.middleRows(hd * dh, dh) * ds;
    }
  });
}

int Tape::gather_columns(Parameter& table, const std::vector<int>& ids) {
  Mat y(table.value.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] < 0 || ids[j] >= table.value.cols()) throw InvalidInput("token id out of range");
    y.col(static_cast<Eigen::Index>(j)) = table.value.col(ids[j]);
  }
  const int self = static_cast<int>(nodes_.size());
  Parameter* tp = &table;
  return push(std::move(y), [this, self, tp, ids] {
    const Mat& gy = nodes_[self].grad;
    for (std::size_t j = 0; j < ids.size(); ++j) tp->grad.col(ids[j]) += gy.col(static_cast<Eigen::Index>(j));
  });
}

int Tape::crop(int x, int h, int w, int h_out, int w_out) {
  if (h_out > h || w_out > w) throw InvalidInput("crop larger than input");
  const Mat& xv = value(x);
  Mat y(xv.rows(), static_cast<Eigen::Index>(h_out) * w_out);
  for (int yy = 0; yy < h_out; ++yy)
    y.middleCols(static_cast<Eigen::Index>(yy) * w_out, w_out) = xv.middleCols(static_cast<Eigen::Index>(yy) * w, w_out);
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x, w, h_out, w_out] {
    const Mat& gy = nodes_[self].grad;
    Mat& gx = grad_of(x);
    for (int yy = 0; yy < h_out; ++yy)
      gx.middleCols(static_cast<Eigen::Index>(yy) * w, w_out) += gy.middleCols(static_cast<Eigen::Index>(yy) * w_out, w_out);
  });
}

int Tape::masked_l1(int m, const Mat& scale, const Mat& target) {
  const Mat& mv = value(m);
  if (mv.rows() != 1 || scale.rows() != 1 || target.rows() != 1 || mv.cols() != scale.cols() ||
      mv.cols() != target.cols())
    throw InvalidInput("masked_l1 shape mismatch");
  const double n = static_cast<double>(mv.cols());
  const Mat r = mv.cwiseProduct(scale) - target;
  Mat y(1, 1);
  y(0, 0) = r.cwiseAbs().sum() / n;
  const int self = static_cast<int>(nodes_.size());
  Mat sg = r.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }).cwiseProduct(scale) / n;
  return push(std::move(y), [this, self, m, sg = std::move(sg)] {
    grad_of(m) += nodes_[self].grad(0, 0) * sg;
  });
}

int Tape::scaled_sum(const std::vector<int>& xs, double coeff) {
  Mat y = Mat::Zero(1, 1);
  for (int x : xs) {
    if (value(x).size() != 1) throw InvalidInput("scaled_sum needs 1x1 inputs");
    y(0, 0) += coeff * value(x)(0, 0);
  }
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, xs, coeff] {
    const double g = nodes_[self].grad(0, 0) * coeff;
    for (int x : xs) grad_of(x)(0, 0) += g;
  });
}

int Tape::sum_product(int x, const Mat& w) {
  const Mat& xv = value(x);
  if (xv.rows() != w.rows() || xv.cols() != w.cols()) throw InvalidInput("sum_product shape mismatch");
  Mat y(1, 1);
  y(0, 0) = xv.cwiseProduct(w).sum();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(y), [this, self, x, w] { grad_of(x) += nodes_[self].grad(0, 0) * w; });
}

}  // namespace opensep::nn
