#include "lami/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "lami/errors.hpp"
#include "lami/kernels.hpp"

namespace lami {
namespace {

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " needs a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  return a.graph().record("matmul", matmul(av, bv), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad();
    const Tensor& x = ctx.input(0);
    const Tensor& w = ctx.input(1);
    const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
    if (ctx.needs(0)) {
      kernels::gemm_nt_acc(g.data().data(), w.data().data(), ctx.input_grad(0).data(), m, n, k);
    }
    if (ctx.needs(1)) {
      kernels::gemm_tn_acc(x.data().data(), g.data().data(), ctx.input_grad(1).data(), m, k, n);
    }
  });
}

Var transpose(Var a) {
  require_matrix("transpose", a.value());
  return a.graph().record("transpose", transpose(a.value()), {a}, [](BackwardContext& ctx) {
    const Tensor gt = transpose(ctx.grad());
    add_into(ctx.input_grad(0), gt.data());
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.mutable_data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.graph().record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
    for (std::size_t i = 0; i < 2; ++i)
      if (ctx.needs(i)) add_into(ctx.input_grad(i), ctx.grad().data());
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.mutable_data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.graph().record("sub", std::move(out), {a, b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) add_into(ctx.input_grad(0), ctx.grad().data());
    if (ctx.needs(1)) {
      auto gb = ctx.input_grad(1);
      auto g = ctx.grad().data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.mutable_data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.graph().record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto g = ctx.grad().data();
    for (std::size_t which = 0; which < 2; ++which) {
      if (!ctx.needs(which)) continue;
      auto other = ctx.input(1 - which).data();
      auto d = ctx.input_grad(which);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& x : out.mutable_data()) x *= factor;
  return a.graph().record("scale", std::move(out), {a}, [factor](BackwardContext& ctx) {
    auto d = ctx.input_grad(0);
    auto g = ctx.grad().data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
  });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  require_matrix("add_row", xv);
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  if (bias.value().size() != d) {
    throw DimensionError("add_row: bias " + shape_str(bias.value().shape()) +
                         " does not match row width of " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  auto o = out.mutable_data();
  auto b = bias.value().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) o[r * d + c] += b[c];
  return x.graph().record("add_row", std::move(out), {x, bias}, [n, d](BackwardContext& ctx) {
    auto g = ctx.grad().data();
    if (ctx.needs(0)) add_into(ctx.input_grad(0), g);
    if (ctx.needs(1)) {
      auto gb = ctx.input_grad(1);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
    }
  });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.mutable_data()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return x.graph().record("gelu", std::move(out), {x}, [](BackwardContext& ctx) {
    auto in = ctx.input(0).data();
    auto g = ctx.grad().data();
    auto d = ctx.input_grad(0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      d[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  require_matrix("layer_norm", xv);
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias do not match width " + std::to_string(d));
  }
  Tensor out({n, d});
  std::vector<double> xhat(n * d), rstd(n);
  auto o = out.mutable_data();
  auto in = xv.data();
  auto gv = gain.value().data();
  auto bv = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = in[r * d + c] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[r * d + c] - mu) * rstd[r];
      o[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return x.graph().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](BackwardContext& ctx) {
        auto g = ctx.grad().data();
        auto gv = ctx.input(1).data();
        if (ctx.needs(1)) {
          auto dg = ctx.input_grad(1);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) dg[c] += g[r * d + c] * xhat[r * d + c];
        }
        if (ctx.needs(2)) {
          auto db = ctx.input_grad(2);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) db[c] += g[r * d + c];
        }
        if (ctx.needs(0)) {
          auto dx = ctx.input_grad(0);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double sum_dh = 0.0, sum_dh_xh = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              sum_dh += dh;
              sum_dh_xh += dh * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              dx[r * d + c] +=
                  rstd[r] * (dh - inv_d * sum_dh - xhat[r * d + c] * inv_d * sum_dh_xh);
            }
          }
        }
      });
}

Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  require_matrix("l2_normalize_rows", xv);
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  Tensor out({n, d});
  std::vector<double> norms(n);
  auto o = out.mutable_data();
  auto in = xv.data();
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += in[r * d + c] * in[r * d + c];
    if (ss == 0.0) throw NumericError("l2_normalize_rows: zero row " + std::to_string(r));
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < d; ++c) o[r * d + c] = in[r * d + c] / norms[r];
  }
  return x.graph().record(
      "l2_normalize_rows", std::move(out), {x},
      [n, d, norms = std::move(norms)](BackwardContext& ctx) {
        auto g = ctx.grad().data();
        auto y = ctx.output().data();
        auto dx = ctx.input_grad(0);
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += y[r * d + c] * g[r * d + c];
          for (std::size_t c = 0; c < d; ++c)
            dx[r * d + c] += (g[r * d + c] - y[r * d + c] * dot) / norms[r];
        }
      });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  require_matrix("gather_rows", tv);
  const std::size_t rows = tv.shape()[0], d = tv.shape()[1];
  Tensor out({ids.size(), d});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    auto src = tv.row(ids[r]);
    std::copy(src.begin(), src.end(), o.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return table.graph().record("gather_rows", std::move(out), {table},
                              [d, idx = std::move(idx)](BackwardContext& ctx) {
                                auto g = ctx.grad().data();
                                auto dt = ctx.input_grad(0);
                                for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t c = 0; c < d; ++c)
                                    dt[idx[r] * d + c] += g[r * d + c];
                              });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  const std::size_t d = parts[0].value().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p.value());
    if (p.value().cols() != d) {
      throw DimensionError("concat_rows width mismatch: " + shape_str(parts[0].value().shape()) +
                           " vs " + shape_str(p.value().shape()));
    }
    n += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(n * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(data.size());
    auto v = p.value().data();
    data.insert(data.end(), v.begin(), v.end());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(
      "concat_rows", Tensor({n, d}, std::move(data)), std::move(inputs),
      [offsets = std::move(offsets)](BackwardContext& ctx) {
        auto g = ctx.grad().data();
        for (std::size_t i = 0; i < offsets.size(); ++i) {
          if (!ctx.needs(i)) continue;
          auto dst = ctx.input_grad(i);
          add_into(dst, g.subspan(offsets[i], dst.size()));
        }
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  if (begin > end || end > xv.rows()) {
    throw IndexError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_str(xv.shape()));
  }
  const std::size_t d = xv.cols();
  auto src = xv.data().subspan(begin * d, (end - begin) * d);
  Tensor out({end - begin, d}, std::vector<double>(src.begin(), src.end()));
  return x.graph().record("slice_rows", std::move(out), {x}, [begin, d](BackwardContext& ctx) {
    auto dst = ctx.input_grad(0).subspan(begin * d, ctx.grad().size());
    add_into(dst, ctx.grad().data());
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  require_matrix("mean_rows", xv);
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  if (n == 0) throw ArgumentError("mean_rows of an empty matrix");
  Tensor out({1, d});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) o[c] += xv.data()[r * d + c];
  for (auto& v : o) v /= static_cast<double>(n);
  return x.graph().record("mean_rows", std::move(out), {x}, [n, d](BackwardContext& ctx) {
    auto g = ctx.grad().data();
    auto dx = ctx.input_grad(0);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) dx[r * d + c] += g[c] * inv;
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.graph().record("sum", Tensor::scalar(s), {x}, [](BackwardContext& ctx) {
    const double g = ctx.grad()[0];
    for (auto& v : ctx.input_grad(0)) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ArgumentError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var cross_entropy(Var logits, std::span<const long> targets) {
  const Tensor& lv = logits.value();
  require_matrix("cross_entropy", lv);
  const std::size_t n = lv.shape()[0], vocab = lv.shape()[1];
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  std::size_t counted = 0;
  double total = 0.0;
  std::vector<double> probs(n * vocab, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - mx);
      z += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= z;
    total += -(row[static_cast<std::size_t>(targets[r])] - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) throw ArgumentError("cross_entropy: no rows with a target");
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<long> tg(targets.begin(), targets.end());
  return logits.graph().record(
      "cross_entropy", Tensor::scalar(total * inv), {logits},
      [n, vocab, inv, probs = std::move(probs), tg = std::move(tg)](BackwardContext& ctx) {
        const double g = ctx.grad()[0] * inv;
        auto dl = ctx.input_grad(0);
        for (std::size_t r = 0; r < n; ++r) {
          if (tg[r] < 0) continue;
          for (std::size_t c = 0; c < vocab; ++c) dl[r * vocab + c] += g * probs[r * vocab + c];
          dl[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
        }
      });
}

Var cross_entropy(Var logits, std::size_t target) {
  const Tensor& lv = logits.value();
  Var row = logits;
  if (lv.rank() != 2) {
    row = logits.graph().record("reshape", lv.reshaped({1, lv.size()}), {logits},
                                [](BackwardContext& ctx) {
                                  add_into(ctx.input_grad(0), ctx.grad().data());
                                });
  } else if (lv.rows() != 1) {
    throw DimensionError("cross_entropy: expected one logits row, got " + shape_str(lv.shape()));
  }
  const long t = static_cast<long>(target);
  return cross_entropy(row, std::span<const long>(&t, 1));
}

// ---------------------------------------------------------------------------
// Attention

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask mask(n);
  for (std::size_t i = 0; i < n; ++i) mask.add_row({KeySpan{0, i + 1}});
  return mask;
}

AttentionMask AttentionMask::from_dense(std::size_t queries, std::size_t keys,
                                        const std::vector<bool>& visible) {
  if (visible.size() != queries * keys) {
    throw DimensionError("dense mask has " + std::to_string(visible.size()) + " entries, need " +
                         std::to_string(queries * keys));
  }
  AttentionMask mask(keys);
  std::vector<KeySpan> spans;
  for (std::size_t i = 0; i < queries; ++i) {
    spans.clear();
    for (std::size_t j = 0; j < keys; ++j) {
      if (!visible[i * keys + j]) continue;
      if (!spans.empty() && spans.back().end == j) {
        spans.back().end = j + 1;
      } else {
        spans.push_back({j, j + 1});
      }
    }
    mask.add_row(spans);
  }
  return mask;
}

void AttentionMask::add_row(std::initializer_list<KeySpan> spans) {
  add_row(std::span<const KeySpan>(spans.begin(), spans.size()));
}

void AttentionMask::add_row(std::span<const KeySpan> spans) {
  for (const auto& s : spans) {
    if (s.begin > s.end || s.end > keys_) {
      throw MaskError("mask span [" + std::to_string(s.begin) + "," + std::to_string(s.end) +
                      ") outside " + std::to_string(keys_) + " keys");
    }
    if (s.begin < s.end) spans_.push_back(s);
  }
  offsets_.push_back(spans_.size());
}

bool AttentionMask::visible(std::size_t i, std::size_t j) const {
  for (const auto& s : row(i))
    if (j >= s.begin && j < s.end) return true;
  return false;
}

Var gated_key_scale(Var gate, const std::vector<bool>& gated) {
  if (gate.value().size() != 1) throw DimensionError("gated_key_scale needs a scalar gate");
  const double gv = gate.value()[0];
  Tensor out({gated.size()});
  auto o = out.mutable_data();
  for (std::size_t j = 0; j < gated.size(); ++j) o[j] = gated[j] ? gv * gv : 1.0;
  return gate.graph().record("gated_key_scale", std::move(out), {gate},
                             [gated](BackwardContext& ctx) {
                               const double gv = ctx.input(0)[0];
                               auto g = ctx.grad().data();
                               double acc = 0.0;
                               for (std::size_t j = 0; j < gated.size(); ++j)
                                 if (gated[j]) acc += g[j];
                               ctx.input_grad(0)[0] += 2.0 * gv * acc;
                             });
}

Var attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads,
              std::optional<Var> key_scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix("attention Q", qv);
  require_matrix("attention K", kv);
  require_matrix("attention V", vv);
  const std::size_t nq = qv.shape()[0], d = qv.shape()[1];
  const std::size_t nk = kv.shape()[0], dv = vv.shape()[1];
  if (kv.shape()[1] != d || vv.shape()[0] != nk) {
    throw DimensionError("attention shape mismatch: Q " + shape_str(qv.shape()) + ", K " +
                         shape_str(kv.shape()) + ", V " + shape_str(vv.shape()));
  }
  if (heads == 0 || d % heads != 0 || dv % heads != 0) {
    throw DimensionError("attention: widths " + std::to_string(d) + "/" + std::to_string(dv) +
                         " not divisible into " + std::to_string(heads) + " heads");
  }
  if (mask.rows() != nq || mask.keys() != nk) {
    throw MaskError("attention mask is " + std::to_string(mask.rows()) + "x" +
                    std::to_string(mask.keys()) + ", expected " + std::to_string(nq) + "x" +
                    std::to_string(nk));
  }
  const double* cs = nullptr;
  if (key_scale) {
    if (key_scale->value().size() != nk) {
      throw DimensionError("attention key_scale has " + std::to_string(key_scale->value().size()) +
                           " entries for " + std::to_string(nk) + " keys");
    }
    cs = key_scale->value().data().data();
    for (std::size_t j = 0; j < nk; ++j)
      if (cs[j] < 0.0) throw ArgumentError("attention key_scale must be nonnegative");
  }
  const std::size_t dh = d / heads, dvh = dv / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  // Per (row, head): weights over the row's visible keys, in span order.
  std::vector<std::size_t> row_offset(nq + 1, 0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::size_t count = 0;
    for (const auto& s : mask.row(i)) count += s.end - s.begin;
    row_offset[i + 1] = row_offset[i] + count;
  }
  const std::size_t total = row_offset[nq];
  std::vector<double> weights(total * heads), unscaled(cs ? total * heads : 0);
  Tensor out({nq, dv});
  auto o = out.mutable_data();
  const double* Q = qv.data().data();
  const double* K = kv.data().data();
  const double* V = vv.data().data();
  std::vector<double> scores;
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t cnt = row_offset[i + 1] - row_offset[i];
    scores.resize(cnt);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* qi = Q + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      std::size_t e = 0;
      for (const auto& s : mask.row(i)) {
        for (std::size_t j = s.begin; j < s.end; ++j, ++e) {
          const double* kj = K + j * d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          scores[e] = dot * scale_factor;
          if (!cs || cs[j] > 0.0) {
            mx = std::max(mx, scores[e]);
            any = true;
          }
        }
      }
      if (!any) {
        throw MaskError("attention: query row " + std::to_string(i) + " has no visible key");
      }
      double* w = weights.data() + (row_offset[i] * heads) + h * cnt;
      double z = 0.0;
      e = 0;
      for (const auto& s : mask.row(i)) {
        for (std::size_t j = s.begin; j < s.end; ++j, ++e) {
          const double ex = std::exp(scores[e] - mx);
          if (cs) unscaled[row_offset[i] * heads + h * cnt + e] = ex;
          w[e] = cs ? cs[j] * ex : ex;
          z += w[e];
        }
      }
      for (std::size_t t = 0; t < cnt; ++t) w[t] /= z;
      if (cs)
        for (std::size_t t = 0; t < cnt; ++t) unscaled[row_offset[i] * heads + h * cnt + t] /= z;
      double* oi = o.data() + i * dv + h * dvh;
      e = 0;
      for (const auto& s : mask.row(i)) {
        for (std::size_t j = s.begin; j < s.end; ++j, ++e) {
          const double* vj = V + j * dv + h * dvh;
          const double we = w[e];
          for (std::size_t c = 0; c < dvh; ++c) oi[c] += we * vj[c];
        }
      }
    }
  }

  std::vector<Var> inputs{q, k, v};
  if (key_scale) inputs.push_back(*key_scale);
  return q.graph().record(
      "attention", std::move(out), std::move(inputs),
      [mask, heads, d, dv, dh, dvh, scale_factor, row_offset = std::move(row_offset),
       weights = std::move(weights), unscaled = std::move(unscaled),
       has_scale = cs != nullptr](BackwardContext& ctx) {
        const std::size_t nq = mask.rows();
        const double* Q = ctx.input(0).data().data();
        const double* K = ctx.input(1).data().data();
        const double* V = ctx.input(2).data().data();
        const double* G = ctx.grad().data().data();
        double* dQ = ctx.needs(0) ? ctx.input_grad(0).data() : nullptr;
        double* dK = ctx.needs(1) ? ctx.input_grad(1).data() : nullptr;
        double* dV = ctx.needs(2) ? ctx.input_grad(2).data() : nullptr;
        double* dC = (has_scale && ctx.needs(3)) ? ctx.input_grad(3).data() : nullptr;
        std::vector<double> dw;
        for (std::size_t i = 0; i < nq; ++i) {
          const std::size_t cnt = row_offset[i + 1] - row_offset[i];
          dw.resize(cnt);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* w = weights.data() + row_offset[i] * heads + h * cnt;
            const double* gi = G + i * dv + h * dvh;
            double dot_wdw = 0.0;
            std::size_t e = 0;
            for (const auto& s : mask.row(i)) {
              for (std::size_t j = s.begin; j < s.end; ++j, ++e) {
                const double* vj = V + j * dv + h * dvh;
                double acc = 0.0;
                for (std::size_t c = 0; c < dvh; ++c) acc += gi[c] * vj[c];
                dw[e] = acc;
                dot_wdw += w[e] * acc;
                if (dV) {
                  double* dvj = dV + j * dv + h * dvh;
                  for (std::size_t c = 0; c < dvh; ++c) dvj[c] += w[e] * gi[c];
                }
              }
            }
            const double* qi = Q + i * d + h * dh;
            e = 0;
            for (const auto& s : mask.row(i)) {
              for (std::size_t j = s.begin; j < s.end; ++j, ++e) {
                const double centered = dw[e] - dot_wdw;
                if (dC) dC[j] += unscaled[row_offset[i] * heads + h * cnt + e] * centered;
                const double ds = w[e] * centered * scale_factor;
                if (ds == 0.0) continue;
                const double* kj = K + j * d + h * dh;
                if (dQ) {
                  double* dqi = dQ + i * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dK) {
                  double* dkj = dK + j * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace lami
