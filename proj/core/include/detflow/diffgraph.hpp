#pragma once

// Reverse-mode differentiation over a per-sample tape.  Parameters live in a
// flat ParamStore and appear on the tape as leaf indices [0, P); everything
// recorded after that is a dynamic node.  Scalar primitives cover the math
// the flow kernels need; affine / matvec / norm are fused vector nodes so the
// conditioner MLPs run as tight loops instead of per-element graphs.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "detflow/errors.hpp"
#include "detflow/operators.hpp"
#include "detflow/rng.hpp"
#include "detflow/sphere.hpp"

namespace detflow {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Ordered registry of named, contiguous, non-overlapping segments.
class ParamLayout {
 public:
  std::size_t add(std::string name, int rows, int cols);
  const ParamSegment* find(std::string_view name) const;
  const std::vector<ParamSegment>& segments() const { return segs_; }
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamSegment> segs_;
  std::size_t total_ = 0;
};

struct ParamStore {
  std::shared_ptr<const ParamLayout> layout;
  std::vector<double> values;

  static ParamStore zeros(std::shared_ptr<const ParamLayout> layout);
  std::size_t size() const { return values.size(); }
};

struct GradStore {
  std::vector<double> grads;

  explicit GradStore(std::size_t n = 0) : grads(n, 0.0) {}
  void reset() { std::fill(grads.begin(), grads.end(), 0.0); }
  std::size_t size() const { return grads.size(); }
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a tape value.  Indices below the parameter count refer to
/// ParamStore leaves; the rest are recorded nodes.
struct Var {
  Tape* tape = nullptr;
  std::int32_t idx = -1;
};

enum class Op : std::uint8_t {
  Const, Add, Sub, Mul, Div, Neg, Sin, Cos, Tanh, Exp, Log, Log1p, Sqrt,
  Softplus, PowC, Atan2, AffineRow, MatvecHead, MatvecSlot, Norm,
};

std::string_view op_name(Op op);

class Tape {
 public:
  Tape(const ParamStore& params, GradStore* sink);

  /// Drops all recorded nodes; parameter leaves stay valid.
  void rewind();
  void set_grad_sink(GradStore* sink) { sink_ = sink; }

  std::size_t n_params() const { return n_params_; }
  std::size_t n_nodes() const { return dyn_.size(); }

  Var param(std::size_t i);
  Var constant(double v);
  double value(Var v) const;

  /// Reverse sweep from `root`; parameter gradients accumulate into the sink.
  void backward(Var root, double seed = 1.0);

  // Fused nodes.  `w_off`/`b_off` are parameter offsets of a weight matrix
  // (out x in, row-major) and bias.
  void affine(std::size_t w_off, std::size_t b_off, int in, int out, std::span<const Var> x,
              std::vector<Var>& y);
  void matvec(const OperatorHandle& op, std::span<const Var> x, std::vector<Var>& y);
  Var norm(std::span<const Var> x);

  Var unary(Op op, Var a, double val, double aux = 0.0);
  Var binary(Op op, Var a, Var b, double val);

 private:
  struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double val = 0.0;
    double grad = 0.0;
    double aux = 0.0;
  };
  struct AffineDesc {
    std::size_t w_off, b_off;
    std::int32_t in, out;
    std::int32_t args_off;
  };
  struct MatvecDesc {
    const OperatorHandle* op;
    std::int32_t args_off;
    std::int32_t n;
    std::int32_t out_base;  // absolute Var index of row 0
  };

  Var push(Node n);
  void check_finite(Op op, double v) const;
  void add_grad(std::int32_t idx, double g);
  std::int32_t stash_args(std::span<const Var> x);
  void gather_values(std::int32_t args_off, int count, double* out) const;

  const double* params_;
  std::size_t n_params_;
  GradStore* sink_;
  std::vector<Node> dyn_;
  std::vector<std::int32_t> args_;
  std::vector<AffineDesc> affine_descs_;
  std::vector<MatvecDesc> matvec_descs_;
  std::vector<double> buf_a_, buf_b_;
};

// Scalar value extraction shared by generic kernels.
inline double scalar_value(double x) { return x; }
inline double scalar_value(Var v) { return v.tape->value(v); }

// ---------------------------------------------------------------------------
// Var arithmetic
// ---------------------------------------------------------------------------

// Generic kernels call these unqualified; pull in the double versions so the
// same code instantiates for plain and recorded scalars.
using std::atan2;
using std::cos;
using std::exp;
using std::log;
using std::log1p;
using std::sin;
using std::sqrt;
using std::tanh;

namespace detail {
inline Var make_const(Tape* t, double v) { return t->constant(v); }
}

inline Var operator+(Var a, Var b) { return a.tape->binary(Op::Add, a, b, scalar_value(a) + scalar_value(b)); }
inline Var operator-(Var a, Var b) { return a.tape->binary(Op::Sub, a, b, scalar_value(a) - scalar_value(b)); }
inline Var operator*(Var a, Var b) { return a.tape->binary(Op::Mul, a, b, scalar_value(a) * scalar_value(b)); }
inline Var operator/(Var a, Var b) { return a.tape->binary(Op::Div, a, b, scalar_value(a) / scalar_value(b)); }
inline Var operator-(Var a) { return a.tape->unary(Op::Neg, a, -scalar_value(a)); }

inline Var operator+(Var a, double c) { return a + detail::make_const(a.tape, c); }
inline Var operator+(double c, Var a) { return detail::make_const(a.tape, c) + a; }
inline Var operator-(Var a, double c) { return a - detail::make_const(a.tape, c); }
inline Var operator-(double c, Var a) { return detail::make_const(a.tape, c) - a; }
inline Var operator*(Var a, double c) { return a * detail::make_const(a.tape, c); }
inline Var operator*(double c, Var a) { return detail::make_const(a.tape, c) * a; }
inline Var operator/(Var a, double c) { return a / detail::make_const(a.tape, c); }
inline Var operator/(double c, Var a) { return detail::make_const(a.tape, c) / a; }

inline Var sin(Var a) {
  const double v = scalar_value(a);
  return a.tape->unary(Op::Sin, a, std::sin(v), std::cos(v));
}
inline Var cos(Var a) {
  const double v = scalar_value(a);
  return a.tape->unary(Op::Cos, a, std::cos(v), -std::sin(v));
}
inline Var tanh(Var a) { return a.tape->unary(Op::Tanh, a, std::tanh(scalar_value(a))); }
inline Var exp(Var a) { return a.tape->unary(Op::Exp, a, std::exp(scalar_value(a))); }
inline Var log(Var a) { return a.tape->unary(Op::Log, a, std::log(scalar_value(a))); }
inline Var log1p(Var a) { return a.tape->unary(Op::Log1p, a, std::log1p(scalar_value(a))); }
inline Var sqrt(Var a) { return a.tape->unary(Op::Sqrt, a, std::sqrt(scalar_value(a))); }
inline Var softplus(Var a) {
  const double v = scalar_value(a);
  const double val = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  const double sig = 1.0 / (1.0 + std::exp(-v));
  return a.tape->unary(Op::Softplus, a, val, sig);
}
inline Var pow_c(Var a, double c) {
  const double v = scalar_value(a);
  return a.tape->unary(Op::PowC, a, std::pow(v, c), c * std::pow(v, c - 1.0));
}
inline Var atan2(Var y, Var x) {
  return y.tape->binary(Op::Atan2, y, x, std::atan2(scalar_value(y), scalar_value(x)));
}

// double overloads so generic kernels compile for both scalar types.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double pow_c(double x, double c) { return std::pow(x, c); }

// ---------------------------------------------------------------------------
// Evaluation contexts
// ---------------------------------------------------------------------------

// Shared row kernel; keeps the plain and recorded paths bit-identical.
inline double affine_row_forward(const double* w_row, double b, const double* x, int in) {
  double acc = b;
  for (int j = 0; j < in; ++j) acc += w_row[j] * x[j];
  return acc;
}

/// Plain double evaluation against a ParamStore.
struct EvalCtx {
  using S = double;
  const ParamStore* ps;

  double param(std::size_t i) const { return ps->values[i]; }
  double constant(double c) const { return c; }

  void affine(std::size_t w_off, std::size_t b_off, int in, int out, std::span<const double> x,
              std::vector<double>& y) const {
    y.resize(static_cast<std::size_t>(out));
    const double* w = ps->values.data() + w_off;
    const double* b = ps->values.data() + b_off;
    for (int r = 0; r < out; ++r) {
      y[static_cast<std::size_t>(r)] =
          affine_row_forward(w + static_cast<std::size_t>(r) * in, b[r], x.data(), in);
    }
  }
  void matvec(const OperatorHandle& op, std::span<const double> x, std::vector<double>& y) const {
    y.resize(static_cast<std::size_t>(op.dim()));
    op.matvec(x, y);
  }
  double norm(std::span<const double> x) const { return stable_norm(x); }
};

/// Recording evaluation: same arithmetic, on a tape.
struct GradCtx {
  using S = Var;
  Tape* tape;

  Var param(std::size_t i) const { return tape->param(i); }
  Var constant(double c) const { return tape->constant(c); }

  void affine(std::size_t w_off, std::size_t b_off, int in, int out, std::span<const Var> x,
              std::vector<Var>& y) const {
    tape->affine(w_off, b_off, in, out, x, y);
  }
  void matvec(const OperatorHandle& op, std::span<const Var> x, std::vector<Var>& y) const {
    tape->matvec(op, x, y);
  }
  Var norm(std::span<const Var> x) const { return tape->norm(x); }
};

// ---------------------------------------------------------------------------
// Conditioner: feed-forward network producing raw transform parameters
// ---------------------------------------------------------------------------

class Conditioner {
 public:
  struct Layer {
    std::size_t w_off, b_off;
    int in, out;
  };

  Conditioner() = default;
  static Conditioner create(ParamLayout& layout, const std::string& prefix, int in_dim,
                            std::span<const int> hidden, int out_dim);

  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }

  /// Hidden layers: fan-in uniform init; final layer: zeros, so the consuming
  /// transform starts as the identity.
  void init_values(ParamStore& params, RngStream& rng) const;

  bool final_layer_is_zero(const ParamStore& params) const;

  template <class Ctx>
  void forward(Ctx& ctx, std::span<const typename Ctx::S> x,
               std::vector<typename Ctx::S>& out) const {
    using S = typename Ctx::S;
    std::vector<S> h(x.begin(), x.end());
    std::vector<S> next;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& l = layers_[li];
      ctx.affine(l.w_off, l.b_off, l.in, l.out, h, next);
      if (li + 1 < layers_.size()) {
        for (S& v : next) v = tanh(v);
      }
      h.swap(next);
    }
    out = std::move(h);
  }

 private:
  std::vector<Layer> layers_;
  int in_dim_ = 0;
  int out_dim_ = 0;
};

// ---------------------------------------------------------------------------
// value_and_grad
// ---------------------------------------------------------------------------

struct ValueAndGrad {
  double value;
  GradStore grads;
};

/// Records `objective` on a fresh tape over `params` and returns the value
/// together with the exact reverse-mode gradient.
ValueAndGrad value_and_grad(const std::function<Var(Tape&)>& objective, const ParamStore& params);

}  // namespace detflow
