#include "safm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace safm {

namespace {

thread_local Tape* g_active_tape = nullptr;

int product(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->shape_str() +
                                " vs " + b->shape_str());
  }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

TensorPtr Tensor::create(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->values.assign(product(t->shape), 0.0);
  t->requires_grad = requires_grad;
  if (requires_grad) t->grad.assign(t->values.size(), 0.0);
  return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> vals, bool requires_grad) {
  if (product(shape) != static_cast<int>(vals.size())) {
    throw std::invalid_argument("Tensor::from: value count does not match shape");
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->values = std::move(vals);
  t->requires_grad = requires_grad;
  if (requires_grad) t->grad.assign(t->values.size(), 0.0);
  return t;
}

TensorPtr Tensor::scalar(double v) { return from({1}, {v}); }

int Tensor::size() const { return static_cast<int>(values.size()); }

double Tensor::item() const {
  if (values.size() != 1) {
    throw std::logic_error("Tensor::item: tensor is not scalar, shape " + shape_str());
  }
  return values[0];
}

void Tensor::zero_grad() {
  grad.assign(values.size(), 0.0);
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- Tape -----------------------------------------------------------------

void Tape::record(const TensorPtr& out, std::function<void(Tape&)> back) {
  out->tape_output = true;
  nodes_.push_back({out, std::move(back)});
}

std::vector<double>& Tape::adjoint(const TensorPtr& t) {
  auto it = adjoints_.find(t.get());
  if (it == adjoints_.end()) {
    it = adjoints_.emplace(t.get(), std::make_pair(t, std::vector<double>(t->values.size(), 0.0)))
             .first;
  }
  return it->second.second;
}

std::vector<double>* Tape::grad_sink(const TensorPtr& t) {
  if (!t->requires_grad && !t->tape_output) return nullptr;
  return &adjoint(t);
}

const std::vector<double>* Tape::find_adjoint(const Tensor* t) const {
  auto it = adjoints_.find(t);
  return it == adjoints_.end() ? nullptr : &it->second.second;
}

void Tape::backward(const TensorPtr& loss) {
  if (loss->size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + loss->shape_str());
  }
  if (!loss->tape_output) {
    throw std::invalid_argument("backward: loss is not an output of the active tape");
  }
  adjoints_.clear();
  adjoint(loss)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (adjoints_.count(it->out.get())) it->back(*this);
  }
  for (auto& [ptr, entry] : adjoints_) {
    const TensorPtr& t = entry.first;
    if (t->requires_grad) {
      t->ensure_grad();
      const auto& adj = entry.second;
      for (std::size_t i = 0; i < adj.size(); ++i) t->grad[i] += adj[i];
    }
  }
  adjoints_.clear();
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

void backward(const TensorPtr& loss) {
  if (!g_active_tape) throw std::logic_error("backward: no active tape");
  g_active_tape->backward(loss);
}

// ---- Operations -----------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  if (b->shape.size() != 2) {
    throw std::invalid_argument("matmul: rhs must be 2-D, got " + b->shape_str());
  }
  if (a->shape.empty() || a->shape.back() != b->shape[0]) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + a->shape_str() + " vs " +
                                b->shape_str());
  }
  const int k = b->shape[0];
  const int m = b->shape[1];
  const int rows = a->size() / k;
  std::vector<int> out_shape(a->shape.begin(), a->shape.end() - 1);
  out_shape.push_back(m);
  auto out = Tensor::create(out_shape);
  const double* av = a->values.data();
  const double* bv = b->values.data();
  double* ov = out->values.data();
  for (int r = 0; r < rows; ++r) {
    for (int i = 0; i < k; ++i) {
      const double ari = av[r * k + i];
      if (ari == 0.0) continue;
      const double* brow = bv + i * m;
      double* orow = ov + r * m;
      for (int j = 0; j < m; ++j) orow[j] += ari * brow[j];
    }
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [a, b, out, rows, k, m](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* ga = t.grad_sink(a)) {
        for (int r = 0; r < rows; ++r) {
          for (int i = 0; i < k; ++i) {
            double s = 0.0;
            const double* brow = b->values.data() + i * m;
            const double* grow = g.data() + r * m;
            for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
            (*ga)[r * k + i] += s;
          }
        }
      }
      if (auto* gb = t.grad_sink(b)) {
        for (int r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * m;
          for (int i = 0; i < k; ++i) {
            const double ari = a->values[r * k + i];
            if (ari == 0.0) continue;
            double* gbrow = gb->data() + i * m;
            for (int j = 0; j < m; ++j) gbrow[j] += ari * grow[j];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = Tensor::create(a->shape);
  for (int i = 0; i < a->size(); ++i) out->values[i] = a->values[i] + b->values[i];
  if (Tape* tp = active_tape()) {
    tp->record(out, [a, b, out](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* ga = t.grad_sink(a))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = t.grad_sink(b))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
  }
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "mul");
  auto out = Tensor::create(a->shape);
  for (int i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * b->values[i];
  if (Tape* tp = active_tape()) {
    tp->record(out, [a, b, out](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* ga = t.grad_sink(a))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b->values[i];
      if (auto* gb = t.grad_sink(b))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a->values[i];
    });
  }
  return out;
}

TensorPtr add_bias(const TensorPtr& x, const TensorPtr& b) {
  if (b->shape.size() != 1 || x->shape.empty() || x->shape.back() != b->shape[0]) {
    throw std::invalid_argument("add_bias: bias " + b->shape_str() + " incompatible with " +
                                x->shape_str());
  }
  const int d = b->shape[0];
  const int rows = x->size() / d;
  auto out = Tensor::create(x->shape);
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < d; ++i) out->values[r * d + i] = x->values[r * d + i] + b->values[i];
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, b, out, rows, d](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* gx = t.grad_sink(x))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      if (auto* gb = t.grad_sink(b)) {
        for (int r = 0; r < rows; ++r)
          for (int i = 0; i < d; ++i) (*gb)[i] += g[r * d + i];
      }
    });
  }
  return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
  auto out = Tensor::create(x->shape);
  for (int i = 0; i < x->size(); ++i) out->values[i] = c * x->values[i];
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, out, c](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* gx = t.grad_sink(x))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
    });
  }
  return out;
}

TensorPtr gelu(const TensorPtr& x) {
  auto out = Tensor::create(x->shape);
  for (int i = 0; i < x->size(); ++i) {
    double v = x->values[i];
    out->values[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, out](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* gx = t.grad_sink(x)) {
        for (int i = 0; i < x->size(); ++i) {
          double v = x->values[i];
          double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
          (*gx)[i] += g[i] * (cdf + v * pdf);
        }
      }
    });
  }
  return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
  if (gain->shape.size() != 1 || gain->shape != bias->shape || x->shape.empty() ||
      x->shape.back() != gain->shape[0]) {
    throw std::invalid_argument("layer_norm: incompatible shapes " + x->shape_str() + ", " +
                                gain->shape_str() + ", " + bias->shape_str());
  }
  const int d = gain->shape[0];
  const int rows = x->size() / d;
  auto out = Tensor::create(x->shape);
  std::vector<double> mus(rows), inv_sigmas(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->values.data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    mus[r] = mu;
    inv_sigmas[r] = inv;
    double* orow = out->values.data() + r * d;
    for (int i = 0; i < d; ++i)
      orow[i] = gain->values[i] * (xr[i] - mu) * inv + bias->values[i];
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, gain, bias, out, rows, d, mus, inv_sigmas](Tape& t) {
      const auto& g = t.adjoint(out);
      auto* gx = t.grad_sink(x);
      auto* gg = t.grad_sink(gain);
      auto* gb = t.grad_sink(bias);
      for (int r = 0; r < rows; ++r) {
        const double* xr = x->values.data() + r * d;
        const double* gr = g.data() + r * d;
        const double mu = mus[r];
        const double inv = inv_sigmas[r];
        if (gg || gb) {
          for (int i = 0; i < d; ++i) {
            if (gg) (*gg)[i] += gr[i] * (xr[i] - mu) * inv;
            if (gb) (*gb)[i] += gr[i];
          }
        }
        if (gx) {
          // d/dx of gain*(x-mu)*inv + bias with mu, sigma functions of x.
          double sum_gy = 0.0, sum_gyxhat = 0.0;
          for (int i = 0; i < d; ++i) {
            double gy = gr[i] * gain->values[i];
            sum_gy += gy;
            sum_gyxhat += gy * (xr[i] - mu) * inv;
          }
          for (int i = 0; i < d; ++i) {
            double gy = gr[i] * gain->values[i];
            double xhat = (xr[i] - mu) * inv;
            (*gx)[r * d + i] += inv * (gy - sum_gy / d - xhat * sum_gyxhat / d);
          }
        }
      }
    });
  }
  return out;
}

TensorPtr scale_by_element(const TensorPtr& x, const TensorPtr& w, int idx) {
  if (w->shape.size() != 1 || idx < 0 || idx >= w->shape[0]) {
    throw std::invalid_argument("scale_by_element: bad weight index");
  }
  const double lam = w->values[idx];
  auto out = Tensor::create(x->shape);
  for (int i = 0; i < x->size(); ++i) out->values[i] = lam * x->values[i];
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, w, out, idx, lam](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* gx = t.grad_sink(x))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += lam * g[i];
      if (auto* gw = t.grad_sink(w)) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * x->values[i];
        (*gw)[idx] += s;
      }
    });
  }
  return out;
}

TensorPtr softmax_vec(const TensorPtr& z) {
  if (z->shape.size() != 1) {
    throw std::invalid_argument("softmax_vec: expects 1-D input, got " + z->shape_str());
  }
  return softmax_last(z);
}

TensorPtr sum_all(const TensorPtr& x) {
  double s = 0.0;
  for (double v : x->values) s += v;
  auto out = Tensor::scalar(s);
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, out](Tape& t) {
      const double g = t.adjoint(out)[0];
      if (auto* gx = t.grad_sink(x))
        for (int i = 0; i < x->size(); ++i) (*gx)[i] += g;
    });
  }
  return out;
}

TensorPtr mean_all(const TensorPtr& x) {
  const int n = x->size();
  double s = 0.0;
  for (double v : x->values) s += v;
  auto out = Tensor::scalar(s / n);
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, out, n](Tape& t) {
      const double g = t.adjoint(out)[0] / n;
      if (auto* gx = t.grad_sink(x))
        for (int i = 0; i < n; ++i) (*gx)[i] += g;
    });
  }
  return out;
}

TensorPtr embed(const TensorPtr& tok_table, const TensorPtr& pos_table,
                const std::vector<int>& ids, int batch, int seq) {
  if (static_cast<int>(ids.size()) != batch * seq) {
    throw std::invalid_argument("embed: ids length does not match batch*seq");
  }
  const int vocab = tok_table->shape[0];
  const int d = tok_table->shape[1];
  if (seq > pos_table->shape[0]) {
    throw std::invalid_argument("embed: sequence longer than positional table");
  }
  auto out = Tensor::create({batch, seq, d});
  for (int b = 0; b < batch; ++b) {
    for (int s = 0; s < seq; ++s) {
      int id = ids[b * seq + s];
      if (id < 0 || id >= vocab) {
        throw std::invalid_argument("embed: token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(vocab));
      }
      double* orow = out->values.data() + (b * seq + s) * d;
      const double* trow = tok_table->values.data() + id * d;
      const double* prow = pos_table->values.data() + s * d;
      for (int i = 0; i < d; ++i) orow[i] = trow[i] + prow[i];
    }
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [tok_table, pos_table, out, ids, batch, seq, d](Tape& t) {
      const auto& g = t.adjoint(out);
      auto* gt = t.grad_sink(tok_table);
      auto* gp = t.grad_sink(pos_table);
      for (int b = 0; b < batch; ++b) {
        for (int s = 0; s < seq; ++s) {
          const double* grow = g.data() + (b * seq + s) * d;
          if (gt) {
            double* trow = gt->data() + ids[b * seq + s] * d;
            for (int i = 0; i < d; ++i) trow[i] += grow[i];
          }
          if (gp) {
            double* prow = gp->data() + s * d;
            for (int i = 0; i < d; ++i) prow[i] += grow[i];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr attention_scores(const TensorPtr& q, const TensorPtr& k, int heads) {
  if (q->shape.size() != 3 || q->shape != k->shape) {
    throw std::invalid_argument("attention_scores: expects matching [B,S,d] inputs");
  }
  const int B = q->shape[0], S = q->shape[1], d = q->shape[2];
  if (d % heads != 0) throw std::invalid_argument("attention_scores: d not divisible by heads");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto out = Tensor::create({B, heads, S, S});
  auto at = [S, d](const TensorPtr& t, int b, int s, int h, int dh, int i) {
    return t->values[(b * S + s) * d + h * dh + i];
  };
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
          double v;
          if (j > i) {
            v = -1e30;  // causal mask
          } else {
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += at(q, b, i, h, dh, c) * at(k, b, j, h, dh, c);
            v = s * inv_sqrt;
          }
          out->values[((b * heads + h) * S + i) * S + j] = v;
        }
  if (Tape* tp = active_tape()) {
    tp->record(out, [q, k, out, B, S, d, heads, dh, inv_sqrt](Tape& t) {
      const auto& g = t.adjoint(out);
      auto* gq = t.grad_sink(q);
      auto* gk = t.grad_sink(k);
      if (!gq && !gk) return;
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < S; ++i)
            for (int j = 0; j <= i; ++j) {
              double gv = g[((b * heads + h) * S + i) * S + j] * inv_sqrt;
              if (gv == 0.0) continue;
              for (int c = 0; c < dh; ++c) {
                double qv = q->values[(b * S + i) * d + h * dh + c];
                double kv = k->values[(b * S + j) * d + h * dh + c];
                if (gq) (*gq)[(b * S + i) * d + h * dh + c] += gv * kv;
                if (gk) (*gk)[(b * S + j) * d + h * dh + c] += gv * qv;
              }
            }
    });
  }
  return out;
}

TensorPtr softmax_last(const TensorPtr& x) {
  if (x->shape.empty()) throw std::invalid_argument("softmax_last: scalar input");
  const int n = x->shape.back();
  const int rows = x->size() / n;
  auto out = Tensor::create(x->shape);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->values.data() + r * n;
    double* orow = out->values.data() + r * n;
    double mx = xr[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      orow[i] = std::exp(xr[i] - mx);
      z += orow[i];
    }
    for (int i = 0; i < n; ++i) orow[i] /= z;
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [x, out, rows, n](Tape& t) {
      const auto& g = t.adjoint(out);
      if (auto* gx = t.grad_sink(x)) {
        for (int r = 0; r < rows; ++r) {
          const double* p = out->values.data() + r * n;
          const double* gr = g.data() + r * n;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) dot += p[i] * gr[i];
          for (int i = 0; i < n; ++i) (*gx)[r * n + i] += p[i] * (gr[i] - dot);
        }
      }
    });
  }
  return out;
}

TensorPtr attention_mix(const TensorPtr& probs, const TensorPtr& v, int heads) {
  if (probs->shape.size() != 4 || v->shape.size() != 3) {
    throw std::invalid_argument("attention_mix: expects [B,H,S,S] probs and [B,S,d] values");
  }
  const int B = v->shape[0], S = v->shape[1], d = v->shape[2];
  const int dh = d / heads;
  auto out = Tensor::create({B, S, d});
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < S; ++i)
        for (int j = 0; j <= i; ++j) {
          double p = probs->values[((b * heads + h) * S + i) * S + j];
          if (p == 0.0) continue;
          const double* vrow = v->values.data() + (b * S + j) * d + h * dh;
          double* orow = out->values.data() + (b * S + i) * d + h * dh;
          for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
  if (Tape* tp = active_tape()) {
    tp->record(out, [probs, v, out, B, S, d, heads, dh](Tape& t) {
      const auto& g = t.adjoint(out);
      auto* gp = t.grad_sink(probs);
      auto* gv = t.grad_sink(v);
      if (!gp && !gv) return;
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < S; ++i)
            for (int j = 0; j <= i; ++j) {
              const double* grow = g.data() + (b * S + i) * d + h * dh;
              const double* vrow = v->values.data() + (b * S + j) * d + h * dh;
              double p = probs->values[((b * heads + h) * S + i) * S + j];
              if (gp) {
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += grow[c] * vrow[c];
                (*gp)[((b * heads + h) * S + i) * S + j] += s;
              }
              if (gv && p != 0.0) {
                double* gvrow = gv->data() + (b * S + j) * d + h * dh;
                for (int c = 0; c < dh; ++c) gvrow[c] += p * grow[c];
              }
            }
    });
  }
  return out;
}

TensorPtr cross_entropy_loss(const TensorPtr& logits, const std::vector<int>& targets,
                             const std::vector<std::uint8_t>& mask) {
  if (logits->shape.empty()) throw std::invalid_argument("cross_entropy_loss: scalar logits");
  const int vocab = logits->shape.back();
  const int rows = logits->size() / vocab;
  if (static_cast<int>(targets.size()) != rows || targets.size() != mask.size()) {
    throw std::invalid_argument("cross_entropy_loss: targets/mask length must match rows");
  }
  int active = 0;
  for (std::uint8_t m : mask) active += (m != 0);
  if (active == 0) {
    throw std::invalid_argument("cross_entropy_loss: empty mask (degenerate batch)");
  }
  double total = 0.0;
  std::vector<double> lses(rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw std::invalid_argument("cross_entropy_loss: target id " + std::to_string(targets[r]) +
                                  " outside vocabulary of " + std::to_string(vocab));
    }
    const double* row = logits->values.data() + r * vocab;
    double mx = row[0];
    for (int i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
    double lse = mx + std::log(z);
    lses[r] = lse;
    total += lse - row[targets[r]];
  }
  auto out = Tensor::scalar(total / active);
  if (Tape* tp = active_tape()) {
    tp->record(out, [logits, out, targets, mask, rows, vocab, active, lses](Tape& t) {
      const double g = t.adjoint(out)[0] / active;
      if (auto* gl = t.grad_sink(logits)) {
        for (int r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          const double* row = logits->values.data() + r * vocab;
          double* grow = gl->data() + r * vocab;
          for (int i = 0; i < vocab; ++i) {
            double p = std::exp(row[i] - lses[r]);
            grow[i] += g * (p - (i == targets[r] ? 1.0 : 0.0));
          }
        }
      }
    });
  }
  return out;
}

TensorPtr cosine_similarity(const TensorPtr& u, const TensorPtr& v, double eps) {
  check_same_shape(u, v, "cosine_similarity");
  if (u->shape.empty()) throw std::invalid_argument("cosine_similarity: scalar input");
  const int d = u->shape.back();
  const int rows = u->size() / d;
  std::vector<int> out_shape(u->shape.begin(), u->shape.end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  auto out = Tensor::create(out_shape);
  for (int r = 0; r < rows; ++r) {
    const double* ur = u->values.data() + r * d;
    const double* vr = v->values.data() + r * d;
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (int i = 0; i < d; ++i) {
      dot += ur[i] * vr[i];
      nu += ur[i] * ur[i];
      nv += vr[i] * vr[i];
    }
    out->values[r] = dot / (std::sqrt(nu) * std::sqrt(nv) + eps);
  }
  if (Tape* tp = active_tape()) {
    tp->record(out, [u, v, out, rows, d, eps](Tape& t) {
      const auto& g = t.adjoint(out);
      auto* gu = t.grad_sink(u);
      auto* gv = t.grad_sink(v);
      if (!gu && !gv) return;
      for (int r = 0; r < rows; ++r) {
        const double* ur = u->values.data() + r * d;
        const double* vr = v->values.data() + r * d;
        double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
        for (int i = 0; i < d; ++i) {
          dot += ur[i] * vr[i];
          nu2 += ur[i] * ur[i];
          nv2 += vr[i] * vr[i];
        }
        double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
        double denom = nu * nv + eps;
        double c = dot / denom;
        double gr = g[r];
        if (gr == 0.0) continue;
        // d c / d u_i = v_i/denom - c * (nv * u_i / nu) / denom; zero-norm
        // factors take subgradient 0.
        double du_norm = nu > 0.0 ? c * nv / (nu * denom) : 0.0;
        double dv_norm = nv > 0.0 ? c * nu / (nv * denom) : 0.0;
        for (int i = 0; i < d; ++i) {
          if (gu) (*gu)[r * d + i] += gr * (vr[i] / denom - du_norm * ur[i]);
          if (gv) (*gv)[r * d + i] += gr * (ur[i] / denom - dv_norm * vr[i]);
        }
      }
    });
  }
  return out;
}

// ---- AdamW ----------------------------------------------------------------

AdamW::AdamW(std::vector<TensorPtr> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  moments_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    moments_[i].m.assign(params_[i]->values.size(), 0.0);
    moments_[i].v.assign(params_[i]->values.size(), 0.0);
    params_[i]->ensure_grad();
  }
}

void AdamW::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = *params_[pi];
    if (p.grad.size() != p.values.size()) {
      throw std::logic_error("AdamW::step: registered parameter has no gradient buffer");
    }
    Moments& mom = moments_[pi];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      // Decoupled weight decay.
      p.values[i] -= cfg_.lr * cfg_.weight_decay * p.values[i];
      double g = p.grad[i];
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = mom.m[i] / bc1;
      double vhat = mom.v[i] / bc2;
      p.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---- Verification ---------------------------------------------------------

double finite_difference_check(const std::function<TensorPtr()>& f, const TensorPtr& x,
                               double step) {
  x->requires_grad = true;
  x->zero_grad();
  {
    TapeScope ts;
    auto loss = f();
    ts.tape().backward(loss);
  }
  std::vector<double> analytic = x->grad;
  double max_rel = 0.0;
  NoGradScope ng;
  for (int i = 0; i < x->size(); ++i) {
    const double orig = x->values[i];
    x->values[i] = orig + step;
    double fp = f()->item();
    x->values[i] = orig - step;
    double fm = f()->item();
    x->values[i] = orig;
    double fd = (fp - fm) / (2.0 * step);
    double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-3});
    max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
  }
  return max_rel;
}

}  // namespace safm
