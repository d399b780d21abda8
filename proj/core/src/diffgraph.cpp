#include "detflow/diffgraph.hpp"

#include <algorithm>
#include <cmath>

namespace detflow {

// ---------------------------------------------------------------------------
// ParamLayout / ParamStore
// ---------------------------------------------------------------------------

std::size_t ParamLayout::add(std::string name, int rows, int cols) {
  if (rows < 0 || cols < 0) throw ConfigError("ParamLayout: negative shape");
  if (find(name) != nullptr) throw ConfigError("ParamLayout: duplicate segment '" + name + "'");
  ParamSegment seg;
  seg.name = std::move(name);
  seg.offset = total_;
  seg.rows = rows;
  seg.cols = cols;
  total_ += seg.size();
  segs_.push_back(std::move(seg));
  return segs_.back().offset;
}

const ParamSegment* ParamLayout::find(std::string_view name) const {
  for (const auto& s : segs_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

ParamStore ParamStore::zeros(std::shared_ptr<const ParamLayout> layout) {
  ParamStore ps;
  ps.values.assign(layout->total(), 0.0);
  ps.layout = std::move(layout);
  return ps;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Log1p: return "log1p";
    case Op::Sqrt: return "sqrt";
    case Op::Softplus: return "softplus";
    case Op::PowC: return "pow";
    case Op::Atan2: return "atan2";
    case Op::AffineRow: return "affine";
    case Op::MatvecHead:
    case Op::MatvecSlot: return "matvec";
    case Op::Norm: return "norm";
  }
  return "?";
}

Tape::Tape(const ParamStore& params, GradStore* sink)
    : params_(params.values.data()), n_params_(params.values.size()), sink_(sink) {
  dyn_.reserve(1 << 12);
  args_.reserve(1 << 10);
}

void Tape::rewind() {
  dyn_.clear();
  args_.clear();
  affine_descs_.clear();
  matvec_descs_.clear();
}

void Tape::check_finite(Op op, double v) const {
  if (!std::isfinite(v)) {
    throw DiffError(std::string(op_name(op)), "non-finite value " + std::to_string(v));
  }
}

Var Tape::push(Node n) {
  dyn_.push_back(n);
  return Var{this, static_cast<std::int32_t>(n_params_ + dyn_.size() - 1)};
}

Var Tape::param(std::size_t i) {
  return Var{this, static_cast<std::int32_t>(i)};
}

Var Tape::constant(double v) {
  check_finite(Op::Const, v);
  Node n;
  n.op = Op::Const;
  n.val = v;
  return push(n);
}

double Tape::value(Var v) const {
  const std::size_t i = static_cast<std::size_t>(v.idx);
  return i < n_params_ ? params_[i] : dyn_[i - n_params_].val;
}

Var Tape::unary(Op op, Var a, double val, double aux) {
  check_finite(op, val);
  Node n;
  n.op = op;
  n.a = a.idx;
  n.val = val;
  n.aux = aux;
  return push(n);
}

Var Tape::binary(Op op, Var a, Var b, double val) {
  check_finite(op, val);
  Node n;
  n.op = op;
  n.a = a.idx;
  n.b = b.idx;
  n.val = val;
  return push(n);
}

std::int32_t Tape::stash_args(std::span<const Var> x) {
  const std::int32_t off = static_cast<std::int32_t>(args_.size());
  for (const Var& v : x) args_.push_back(v.idx);
  return off;
}

void Tape::gather_values(std::int32_t args_off, int count, double* out) const {
  for (int j = 0; j < count; ++j) {
    const std::size_t i = static_cast<std::size_t>(args_[static_cast<std::size_t>(args_off) + j]);
    out[j] = i < n_params_ ? params_[i] : dyn_[i - n_params_].val;
  }
}

void Tape::affine(std::size_t w_off, std::size_t b_off, int in, int out, std::span<const Var> x,
                  std::vector<Var>& y) {
  AffineDesc d;
  d.w_off = w_off;
  d.b_off = b_off;
  d.in = in;
  d.out = out;
  d.args_off = stash_args(x);
  const std::int32_t desc = static_cast<std::int32_t>(affine_descs_.size());
  affine_descs_.push_back(d);

  buf_a_.resize(static_cast<std::size_t>(in));
  gather_values(d.args_off, in, buf_a_.data());

  y.resize(static_cast<std::size_t>(out));
  for (int r = 0; r < out; ++r) {
    const double* w_row = params_ + w_off + static_cast<std::size_t>(r) * in;
    const double val = affine_row_forward(w_row, params_[b_off + r], buf_a_.data(), in);
    check_finite(Op::AffineRow, val);
    Node n;
    n.op = Op::AffineRow;
    n.a = desc;
    n.b = r;
    n.val = val;
    y[static_cast<std::size_t>(r)] = push(n);
  }
}

void Tape::matvec(const OperatorHandle& op, std::span<const Var> x, std::vector<Var>& y) {
  const int n = op.dim();
  if (static_cast<int>(x.size()) != n) throw DimensionError("tape matvec: size mismatch");
  MatvecDesc d;
  d.op = &op;
  d.args_off = stash_args(x);
  d.n = n;
  d.out_base = static_cast<std::int32_t>(n_params_ + dyn_.size());
  const std::int32_t desc = static_cast<std::int32_t>(matvec_descs_.size());
  matvec_descs_.push_back(d);

  buf_a_.resize(static_cast<std::size_t>(n));
  buf_b_.resize(static_cast<std::size_t>(n));
  gather_values(d.args_off, n, buf_a_.data());
  op.matvec(buf_a_, buf_b_);

  y.resize(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    check_finite(r == 0 ? Op::MatvecHead : Op::MatvecSlot, buf_b_[static_cast<std::size_t>(r)]);
    Node node;
    node.op = r == 0 ? Op::MatvecHead : Op::MatvecSlot;
    node.a = desc;
    node.b = r;
    node.val = buf_b_[static_cast<std::size_t>(r)];
    y[static_cast<std::size_t>(r)] = push(node);
  }
}

Var Tape::norm(std::span<const Var> x) {
  const std::int32_t args_off = stash_args(x);
  const int count = static_cast<int>(x.size());
  buf_a_.resize(static_cast<std::size_t>(count));
  gather_values(args_off, count, buf_a_.data());
  const double val = stable_norm(buf_a_);
  check_finite(Op::Norm, val);
  Node n;
  n.op = Op::Norm;
  n.a = args_off;
  n.b = count;
  n.val = val;
  return push(n);
}

void Tape::add_grad(std::int32_t idx, double g) {
  const std::size_t i = static_cast<std::size_t>(idx);
  if (i < n_params_) {
    sink_->grads[i] += g;
  } else {
    dyn_[i - n_params_].grad += g;
  }
}

void Tape::backward(Var root, double seed) {
  if (sink_ == nullptr) throw DiffError("backward", "no gradient sink bound");
  if (sink_->grads.size() != n_params_) throw DiffError("backward", "sink size mismatch");
  const std::size_t ri = static_cast<std::size_t>(root.idx);
  if (ri < n_params_) {
    sink_->grads[ri] += seed;
    return;
  }
  dyn_[ri - n_params_].grad += seed;

  auto val_of = [&](std::int32_t idx) {
    const std::size_t i = static_cast<std::size_t>(idx);
    return i < n_params_ ? params_[i] : dyn_[i - n_params_].val;
  };

  for (std::size_t pos = dyn_.size(); pos-- > 0;) {
    const Node& n = dyn_[pos];
    const double g = n.grad;
    if (g == 0.0 && n.op != Op::MatvecHead) continue;
    switch (n.op) {
      case Op::Const:
        break;
      case Op::Add:
        add_grad(n.a, g);
        add_grad(n.b, g);
        break;
      case Op::Sub:
        add_grad(n.a, g);
        add_grad(n.b, -g);
        break;
      case Op::Mul:
        add_grad(n.a, g * val_of(n.b));
        add_grad(n.b, g * val_of(n.a));
        break;
      case Op::Div: {
        const double bv = val_of(n.b);
        add_grad(n.a, g / bv);
        add_grad(n.b, -g * n.val / bv);
        break;
      }
      case Op::Neg:
        add_grad(n.a, -g);
        break;
      case Op::Sin:
      case Op::Cos:
      case Op::Softplus:
        add_grad(n.a, g * n.aux);
        break;
      case Op::Tanh:
        add_grad(n.a, g * (1.0 - n.val * n.val));
        break;
      case Op::Exp:
        add_grad(n.a, g * n.val);
        break;
      case Op::Log:
        add_grad(n.a, g / val_of(n.a));
        break;
      case Op::Log1p:
        add_grad(n.a, g / (1.0 + val_of(n.a)));
        break;
      case Op::Sqrt:
        add_grad(n.a, g * 0.5 / n.val);
        break;
      case Op::PowC:
        add_grad(n.a, g * n.aux);
        break;
      case Op::Atan2: {
        const double y = val_of(n.a);
        const double x = val_of(n.b);
        const double denom = x * x + y * y;
        add_grad(n.a, g * x / denom);
        add_grad(n.b, -g * y / denom);
        break;
      }
      case Op::AffineRow: {
        const AffineDesc& d = affine_descs_[static_cast<std::size_t>(n.a)];
        const int r = n.b;
        const std::size_t w_row = d.w_off + static_cast<std::size_t>(r) * d.in;
        sink_->grads[d.b_off + static_cast<std::size_t>(r)] += g;
        for (int j = 0; j < d.in; ++j) {
          const std::int32_t xj = args_[static_cast<std::size_t>(d.args_off) + j];
          sink_->grads[w_row + static_cast<std::size_t>(j)] += g * val_of(xj);
          add_grad(xj, g * params_[w_row + static_cast<std::size_t>(j)]);
        }
        break;
      }
      case Op::MatvecHead: {
        const MatvecDesc& d = matvec_descs_[static_cast<std::size_t>(n.a)];
        buf_a_.resize(static_cast<std::size_t>(d.n));
        buf_b_.resize(static_cast<std::size_t>(d.n));
        const std::size_t base = static_cast<std::size_t>(d.out_base) - n_params_;
        for (int r = 0; r < d.n; ++r) buf_a_[static_cast<std::size_t>(r)] = dyn_[base + r].grad;
        d.op->matvec_transpose(buf_a_, buf_b_);
        for (int j = 0; j < d.n; ++j) {
          add_grad(args_[static_cast<std::size_t>(d.args_off) + j],
                   buf_b_[static_cast<std::size_t>(j)]);
        }
        break;
      }
      case Op::MatvecSlot:
        break;  // handled by the head
      case Op::Norm: {
        const double r = n.val;
        for (int j = 0; j < n.b; ++j) {
          const std::int32_t xj = args_[static_cast<std::size_t>(n.a) + j];
          add_grad(xj, g * val_of(xj) / r);
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Conditioner
// ---------------------------------------------------------------------------

Conditioner Conditioner::create(ParamLayout& layout, const std::string& prefix, int in_dim,
                                std::span<const int> hidden, int out_dim) {
  Conditioner c;
  c.in_dim_ = in_dim;
  c.out_dim_ = out_dim;
  int prev = in_dim;
  for (std::size_t i = 0; i <= hidden.size(); ++i) {
    const int width = i < hidden.size() ? hidden[i] : out_dim;
    Layer l;
    l.in = prev;
    l.out = width;
    const std::string tag = prefix + ".l" + std::to_string(i);
    l.w_off = layout.add(tag + ".w", width, prev);
    l.b_off = layout.add(tag + ".b", width, 1);
    c.layers_.push_back(l);
    prev = width;
  }
  return c;
}

void Conditioner::init_values(ParamStore& params, RngStream& rng) const {
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    const bool final_layer = li + 1 == layers_.size();
    double* w = params.values.data() + l.w_off;
    double* b = params.values.data() + l.b_off;
    const std::size_t nw = static_cast<std::size_t>(l.in) * l.out;
    if (final_layer) {
      std::fill(w, w + nw, 0.0);
      std::fill(b, b + l.out, 0.0);
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(l.in, 1)));
    for (std::size_t i = 0; i < nw; ++i) w[i] = bound * (2.0 * rng.next_unit() - 1.0);
    for (int i = 0; i < l.out; ++i) b[i] = bound * (2.0 * rng.next_unit() - 1.0);
  }
}

bool Conditioner::final_layer_is_zero(const ParamStore& params) const {
  const Layer& l = layers_.back();
  const double* w = params.values.data() + l.w_off;
  const double* b = params.values.data() + l.b_off;
  const std::size_t nw = static_cast<std::size_t>(l.in) * l.out;
  for (std::size_t i = 0; i < nw; ++i) {
    if (w[i] != 0.0) return false;
  }
  for (int i = 0; i < l.out; ++i) {
    if (b[i] != 0.0) return false;
  }
  return true;
}

ValueAndGrad value_and_grad(const std::function<Var(Tape&)>& objective, const ParamStore& params) {
  GradStore grads(params.size());
  Tape tape(params, &grads);
  const Var root = objective(tape);
  const double value = tape.value(root);
  tape.backward(root);
  return {value, std::move(grads)};
}

}  // namespace detflow
