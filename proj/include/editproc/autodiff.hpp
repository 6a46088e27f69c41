#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "editproc/common.hpp"

namespace editproc::ad {

using Mat = Eigen::MatrixXd;

// A named trainable array. Gradients accumulate across backward passes (and
// across tapes) until zero_grad, which is what batched training relies on.
struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param(std::string n, int rows, int cols)
      : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  int64_t size() const { return value.size(); }
};

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Append-only reverse-mode tape over dense matrices. Nodes are created in
// topological order by construction; backward() replays them in reverse.
// One tape corresponds to one forward computation and is then discarded.
// Nodes live in a deque: references handed to closures must stay put.
class Tape {
 public:
  Var leaf(Param& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    Var v = push();
    Node& n = nodes_[v.idx];
    n.pvalue = &p.value;
    n.param = &p;
    param_vars_[&p] = v;
    return v;
  }

  Var constant(Mat m) {
    Var v = push();
    Node& n = nodes_[v.idx];
    n.value = std::move(m);
    n.pvalue = &n.value;
    n.needs_grad = false;
    return v;
  }

  const Mat& val(Var v) const { return *nodes_[v.idx].pvalue; }

  // Embedding lookup: out.row(i) = emb.value.row(ids[i]).
  Var gather_rows(Param& emb, std::vector<int> ids) {
    Mat out(static_cast<int>(ids.size()), emb.value.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < emb.value.rows(),
              "gather_rows: id out of range in " + emb.name);
      out.row(static_cast<int>(i)) = emb.value.row(ids[i]);
    }
    Var v = make(std::move(out));
    Param* p = &emb;
    nodes_[v.idx].backward = [p, ids = std::move(ids)](Tape&, const Node& self) {
      for (size_t i = 0; i < ids.size(); ++i)
        p->grad.row(ids[i]) += self.grad.row(static_cast<int>(i));
    };
    return v;
  }

  Var matmul(Var a, Var b) {
    Var v = make(val(a) * val(b));
    nodes_[v.idx].backward = [a, b](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad * t.val(b).transpose();
      if (t.wants_grad(b)) t.grad_of(b) += t.val(a).transpose() * self.grad;
    };
    return v;
  }

  // a * b^T; convenient for attention scores.
  Var matmul_nt(Var a, Var b) {
    Var v = make(val(a) * val(b).transpose());
    nodes_[v.idx].backward = [a, b](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad * t.val(b);
      if (t.wants_grad(b)) t.grad_of(b) += self.grad.transpose() * t.val(a);
    };
    return v;
  }

  Var add(Var a, Var b) {
    Var v = make(val(a) + val(b));
    nodes_[v.idx].backward = [a, b](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad;
      if (t.wants_grad(b)) t.grad_of(b) += self.grad;
    };
    return v;
  }

  // x + row broadcast over all rows of x; row must be 1 x cols.
  Var add_row(Var x, Var row) {
    Mat out = val(x);
    out.rowwise() += Eigen::RowVectorXd(val(row).row(0));
    Var v = make(std::move(out));
    nodes_[v.idx].backward = [x, row](Tape& t, const Node& self) {
      if (t.wants_grad(x)) t.grad_of(x) += self.grad;
      if (t.wants_grad(row)) t.grad_of(row).row(0) += self.grad.colwise().sum();
    };
    return v;
  }

  Var scale(Var a, double c) {
    Var v = make(val(a) * c);
    nodes_[v.idx].backward = [a, c](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad * c;
    };
    return v;
  }

  Var add_const(Var a, const Mat& m) {
    Var v = make(val(a) + m);
    nodes_[v.idx].backward = [a](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad;
    };
    return v;
  }

  // Elementwise product with a fixed matrix (dropout masks and the like).
  Var mul_const(Var a, Mat m) {
    Var v = make(val(a).cwiseProduct(m));
    nodes_[v.idx].backward = [a, m = std::move(m)](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a) += self.grad.cwiseProduct(m);
    };
    return v;
  }

  Var softmax_rows(Var a) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      Eigen::RowVectorXd e = (x.row(i).array() - x.row(i).maxCoeff()).exp();
      y.row(i) = e / e.sum();
    }
    Var v = make(std::move(y));
    nodes_[v.idx].backward = [a](Tape& t, const Node& self) {
      if (!t.wants_grad(a)) return;
      const Mat& y = self.value;
      Mat gy = self.grad.cwiseProduct(y);
      Mat& dst = t.grad_of(a);
      for (int i = 0; i < y.rows(); ++i)
        dst.row(i) += gy.row(i) - y.row(i) * gy.row(i).sum();
    };
    return v;
  }

  Var log_softmax_rows(Var a) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      double mx = x.row(i).maxCoeff();
      double lse = std::log((x.row(i).array() - mx).exp().sum()) + mx;
      y.row(i) = x.row(i).array() - lse;
    }
    Var v = make(std::move(y));
    nodes_[v.idx].backward = [a](Tape& t, const Node& self) {
      if (!t.wants_grad(a)) return;
      const Mat& logp = self.value;
      Mat& dst = t.grad_of(a);
      for (int i = 0; i < logp.rows(); ++i) {
        double gsum = self.grad.row(i).sum();
        dst.row(i) += self.grad.row(i) - logp.row(i).array().exp().matrix() * gsum;
      }
    };
    return v;
  }

  // Negative sum of picked log-probabilities: -sum_i logp(i, ids[i]).
  // Returns a 1x1 scalar node.
  Var pick_nll(Var logp, std::vector<int> ids) {
    const Mat& lp = val(logp);
    require(static_cast<int>(ids.size()) == lp.rows(), "pick_nll: id count != row count");
    double total = 0.0;
    for (size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < lp.cols(), "pick_nll: id out of range");
      total -= lp(static_cast<int>(i), ids[i]);
    }
    Var v = make(Mat::Constant(1, 1, total));
    nodes_[v.idx].backward = [logp, ids = std::move(ids)](Tape& t, const Node& self) {
      if (!t.wants_grad(logp)) return;
      double g = self.grad(0, 0);
      Mat& dst = t.grad_of(logp);
      for (size_t i = 0; i < ids.size(); ++i) dst(static_cast<int>(i), ids[i]) -= g;
    };
    return v;
  }

  Var gelu(Var a) {
    const Mat& x = val(a);
    Mat y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
    Var v = make(std::move(y));
    nodes_[v.idx].backward = [a](Tape& t, const Node& self) {
      if (!t.wants_grad(a)) return;
      Mat d = t.val(a).unaryExpr([](double v) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
      t.grad_of(a) += self.grad.cwiseProduct(d);
    };
    return v;
  }

  // Row-wise layer norm with learned gain/bias (1 x cols leaves).
  Var layer_norm(Var x, Var gamma, Var beta) {
    static constexpr double kEps = 1e-5;
    const Mat& xv = val(x);
    const int rows = static_cast<int>(xv.rows());
    const int cols = static_cast<int>(xv.cols());
    auto xhat = std::make_shared<Mat>(rows, cols);
    auto inv_std = std::make_shared<Eigen::VectorXd>(rows);
    Mat out(rows, cols);
    for (int i = 0; i < rows; ++i) {
      double mean = xv.row(i).mean();
      double var = (xv.row(i).array() - mean).square().sum() / cols;
      double istd = 1.0 / std::sqrt(var + kEps);
      (*inv_std)(i) = istd;
      xhat->row(i) = (xv.row(i).array() - mean) * istd;
      out.row(i) = xhat->row(i).cwiseProduct(val(gamma).row(0)) + val(beta).row(0);
    }
    Var v = make(std::move(out));
    nodes_[v.idx].backward = [x, gamma, beta, xhat, inv_std](Tape& t, const Node& self) {
      if (t.wants_grad(gamma))
        t.grad_of(gamma).row(0) += self.grad.cwiseProduct(*xhat).colwise().sum();
      if (t.wants_grad(beta)) t.grad_of(beta).row(0) += self.grad.colwise().sum();
      if (!t.wants_grad(x)) return;
      const Eigen::RowVectorXd g0 = t.val(gamma).row(0);
      Mat& dx = t.grad_of(x);
      for (int i = 0; i < self.grad.rows(); ++i) {
        Eigen::RowVectorXd dy = self.grad.row(i).cwiseProduct(g0);
        double m1 = dy.mean();
        double m2 = dy.cwiseProduct(xhat->row(i)).mean();
        dx.row(i) += ((dy.array() - m1 - xhat->row(i).array() * m2) * (*inv_std)(i)).matrix();
      }
    };
    return v;
  }

  Var slice_rows(Var a, int start, int count) {
    const Mat& x = val(a);
    require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows out of range");
    Var v = make(x.middleRows(start, count));
    nodes_[v.idx].backward = [a, start, count](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a).middleRows(start, count) += self.grad;
    };
    return v;
  }

  Var slice_cols(Var a, int start, int count) {
    const Mat& x = val(a);
    require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols out of range");
    Var v = make(x.middleCols(start, count));
    nodes_[v.idx].backward = [a, start, count](Tape& t, const Node& self) {
      if (t.wants_grad(a)) t.grad_of(a).middleCols(start, count) += self.grad;
    };
    return v;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    int rows = 0;
    const int cols = static_cast<int>(val(parts[0]).cols());
    for (Var p : parts) rows += static_cast<int>(val(p).rows());
    Mat out(rows, cols);
    int row = 0;
    for (Var p : parts) {
      out.middleRows(row, static_cast<int>(val(p).rows())) = val(p);
      row += static_cast<int>(val(p).rows());
    }
    Var v = make(std::move(out));
    nodes_[v.idx].backward = [parts](Tape& t, const Node& self) {
      int row = 0;
      for (Var p : parts) {
        int r = static_cast<int>(t.val(p).rows());
        if (t.wants_grad(p)) t.grad_of(p) += self.grad.middleRows(row, r);
        row += r;
      }
    };
    return v;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    int cols = 0;
    const int rows = static_cast<int>(val(parts[0]).rows());
    for (Var p : parts) cols += static_cast<int>(val(p).cols());
    Mat out(rows, cols);
    int col = 0;
    for (Var p : parts) {
      out.middleCols(col, static_cast<int>(val(p).cols())) = val(p);
      col += static_cast<int>(val(p).cols());
    }
    Var v = make(std::move(out));
    nodes_[v.idx].backward = [parts](Tape& t, const Node& self) {
      int col = 0;
      for (Var p : parts) {
        int c = static_cast<int>(t.val(p).cols());
        if (t.wants_grad(p)) t.grad_of(p) += self.grad.middleCols(col, c);
        col += c;
      }
    };
    return v;
  }

  // Mean over all rows -> 1 x cols.
  Var mean_rows(Var a) {
    const Mat& x = val(a);
    require(x.rows() > 0, "mean_rows: empty input");
    Var v = make(Mat(x.colwise().mean()));
    const double inv = 1.0 / x.rows();
    nodes_[v.idx].backward = [a, inv](Tape& t, const Node& self) {
      if (!t.wants_grad(a)) return;
      Eigen::RowVectorXd g = self.grad.row(0) * inv;
      t.grad_of(a).rowwise() += g;
    };
    return v;
  }

  Var sum(const std::vector<Var>& scalars) {
    require(!scalars.empty(), "sum: no terms");
    double total = 0;
    for (Var s : scalars) total += val(s)(0, 0);
    Var v = make(Mat::Constant(1, 1, total));
    nodes_[v.idx].backward = [scalars](Tape& t, const Node& self) {
      for (Var s : scalars)
        if (t.wants_grad(s)) t.grad_of(s)(0, 0) += self.grad(0, 0);
    };
    return v;
  }

  Var zero_scalar() { return constant(Mat::Zero(1, 1)); }

  // Backward from a scalar root; accumulates into every reachable Param.grad.
  void backward(Var root) {
    require(val(root).rows() == 1 && val(root).cols() == 1, "backward root must be scalar");
    grad_of(root)(0, 0) += 1.0;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;  // not reached from the root
      if (n.param) n.param->grad += n.grad;
      if (n.backward) n.backward(*this, n);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

  struct Node {
    Mat value;
    const Mat* pvalue = nullptr;
    Mat grad;
    Param* param = nullptr;
    bool needs_grad = true;
    std::function<void(Tape&, const Node&)> backward;
  };

  bool wants_grad(Var v) const { return nodes_[v.idx].needs_grad; }

  Mat& grad_of(Var v) {
    Node& n = nodes_[v.idx];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.pvalue->rows(), n.pvalue->cols());
    return n.grad;
  }

  Var push() {
    nodes_.emplace_back();
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Mat value) {
    Var v = push();
    Node& n = nodes_[v.idx];
    n.value = std::move(value);
    n.pvalue = &n.value;
    return v;
  }

  std::deque<Node> nodes_;
  std::unordered_map<Param*, Var> param_vars_;
};

}  // namespace editproc::ad
