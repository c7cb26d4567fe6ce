// SPDX-License-Identifier: Apache-2.0

#include "ccmd/distill.hpp"

#include <stdexcept>

namespace ccmd::distill {

using nlohmann::json;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::None: return "none";
    case Mode::GlobalOnly: return "global";
    case Mode::LocalOnly: return "local";
    case Mode::GlobalLocal: return "global+local";
    case Mode::NaiveAll: return "naive-all";
  }
  return "?";
}
const char* to_string(LayerScope s) { return s == LayerScope::All ? "all" : "last"; }
const char* to_string(WeightRule r) { return r == WeightRule::Manual ? "manual" : "coordinating"; }

Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::None, Mode::GlobalOnly, Mode::LocalOnly, Mode::GlobalLocal, Mode::NaiveAll})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown distillation mode '" + s +
                              "' (expected none, global, local, global+local, naive-all)");
}
LayerScope scope_from_string(const std::string& s) {
  if (s == "all") return LayerScope::All;
  if (s == "last") return LayerScope::Last;
  throw std::invalid_argument("unknown layer scope '" + s + "' (expected all or last)");
}
WeightRule rule_from_string(const std::string& s) {
  if (s == "manual") return WeightRule::Manual;
  if (s == "coordinating") return WeightRule::Coordinating;
  throw std::invalid_argument("unknown weight rule '" + s + "' (expected manual or coordinating)");
}

void DistillConfig::validate() const {
  if (!(manual_weight >= 0.0)) throw std::invalid_argument("distill: manual weight must be >= 0");
}

json to_json(const DistillConfig& cfg) {
  return json{{"mode", to_string(cfg.mode)},
              {"scope", to_string(cfg.scope)},
              {"rule", to_string(cfg.rule)},
              {"manual_weight", cfg.manual_weight},
              {"arch", to_string(cfg.arch)},
              {"local_includes_virtual", cfg.local_includes_virtual}};
}

DistillConfig distill_config_from_json(const json& j) {
  DistillConfig c;
  c.mode = mode_from_string(j.value("mode", std::string(to_string(c.mode))));
  c.scope = scope_from_string(j.value("scope", std::string(to_string(c.scope))));
  c.rule = rule_from_string(j.value("rule", std::string(to_string(c.rule))));
  c.manual_weight = j.value("manual_weight", c.manual_weight);
  c.arch = arch_from_string(j.value("arch", std::string(to_string(c.arch))));
  c.local_includes_virtual = j.value("local_includes_virtual", c.local_includes_virtual);
  c.validate();
  return c;
}

ad::Tensor detach(const ad::Tensor& t, ad::Tape& tape) {
  return tape.constant(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
}

net::LayerTrace detach(const net::LayerTrace& trace, ad::Tape& tape) {
  net::LayerTrace out;
  for (const auto& x : trace.tokens) out.tokens.push_back(detach(x, tape));
  for (const auto& a : trace.attention) out.attention.push_back(detach(a, tape));
  return out;
}

ad::Tensor supervised_l1(const ad::Tensor& pred, std::span<const double> labels) {
  if (pred.shape() != ad::Shape{labels.size()})
    throw std::invalid_argument("supervised_l1: predictions " + ad::to_string(pred.shape()) +
                                " vs " + std::to_string(labels.size()) + " labels");
  ad::Tensor y = pred.tape().constant({labels.size()}, {labels.begin(), labels.end()});
  return ad::mean(ad::abs(ad::sub(pred, y)));
}

namespace {

std::pair<std::size_t, std::size_t> layer_range(const net::LayerTrace& s,
                                                const net::LayerTrace& t, LayerScope scope) {
  if (s.layers() != t.layers())
    throw std::invalid_argument("distill: trace length mismatch (student " +
                                std::to_string(s.layers()) + " layers, teacher " +
                                std::to_string(t.layers()) + ")");
  if (s.layers() == 0) throw std::invalid_argument("distill: empty trace");
  for (std::size_t l = 0; l < s.layers(); ++l)
    if (s.tokens[l].shape() != t.tokens[l].shape())
      throw std::invalid_argument("distill: layer " + std::to_string(l + 1) + " shape " +
                                  ad::to_string(s.tokens[l].shape()) + " vs teacher " +
                                  ad::to_string(t.tokens[l].shape()) +
                                  " (widths differ and no projection is configured)");
  return scope == LayerScope::All ? std::pair{std::size_t{0}, s.layers()}
                                  : std::pair{s.layers() - 1, s.layers()};
}

// Sum over selected layers of per-token width-summed |S - T|, masked: [B, T].
ad::Tensor token_l1(const net::LayerTrace& student, const net::LayerTrace& teacher,
                    const mol::GraphBatch& batch, LayerScope scope, bool include_virtual) {
  const auto [lo, hi] = layer_range(student, teacher, scope);
  ad::Tape& tape = student.tokens.front().tape();
  const std::size_t B = batch.batch, T = batch.tokens;
  if (student.tokens.front().dim(0) != B || student.tokens.front().dim(1) != T)
    throw std::invalid_argument("distill: trace does not match batch layout");
  std::vector<double> m(batch.mask);
  if (!include_virtual)
    for (std::size_t b = 0; b < B; ++b) m[batch.token_index(b, 0)] = 0.0;
  ad::Tensor mask = tape.constant({B, T}, std::move(m));
  ad::Tensor acc;
  for (std::size_t l = lo; l < hi; ++l) {
    ad::Tensor diff = ad::abs(ad::sub(student.tokens[l], detach(teacher.tokens[l], tape)));
    ad::Tensor per_token = ad::mul(ad::sum_axis(diff, 2), mask);
    acc = acc.valid() ? ad::add(acc, per_token) : per_token;
  }
  return acc;
}

std::vector<double> token_counts(const mol::GraphBatch& batch, bool include_virtual) {
  std::vector<double> c(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b)
    c[b] = batch.atom_counts[b] + (include_virtual ? 1.0 : 0.0);
  return c;
}

}  // namespace

ad::Tensor loss_global(const net::LayerTrace& student, const net::LayerTrace& teacher,
                       LayerScope scope) {
  const auto [lo, hi] = layer_range(student, teacher, scope);
  ad::Tape& tape = student.tokens.front().tape();
  ad::Tensor acc;
  for (std::size_t l = lo; l < hi; ++l) {
    const ad::Tensor& s = student.tokens[l];
    ad::Tensor t = detach(teacher.tokens[l], tape);
    ad::Tensor term = ad::mean(ad::abs(ad::sub(ad::slice(s, 1, 0, 1), ad::slice(t, 1, 0, 1))));
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  return acc;
}

ad::Tensor loss_local_sum(const net::LayerTrace& student, const net::LayerTrace& teacher,
                          const mol::GraphBatch& batch, LayerScope scope, bool include_virtual) {
  const double d = static_cast<double>(student.tokens.front().dim(2));
  return ad::scale(ad::sum_axis(token_l1(student, teacher, batch, scope, include_virtual), 1),
                   1.0 / d);
}

ad::Tensor loss_local_mean(const net::LayerTrace& student, const net::LayerTrace& teacher,
                           const mol::GraphBatch& batch, LayerScope scope, bool include_virtual) {
  ad::Tensor summed = loss_local_sum(student, teacher, batch, scope, include_virtual);
  auto counts = token_counts(batch, include_virtual);
  for (auto& c : counts) c = c > 0.0 ? 1.0 / c : 0.0;
  return ad::mul(summed, summed.tape().constant({batch.batch}, std::move(counts)));
}

ad::Tensor loss_naive_all(const net::LayerTrace& student, const net::LayerTrace& teacher,
                          const mol::GraphBatch& batch, LayerScope scope) {
  const double d = static_cast<double>(student.tokens.front().dim(2));
  double tokens = 0.0;
  for (double c : token_counts(batch, true)) tokens += c;
  return ad::scale(ad::sum(token_l1(student, teacher, batch, scope, true)), 1.0 / (d * tokens));
}

double coordinating_weight(int n_atoms, Arch arch) {
  if (n_atoms < 1)
    throw std::invalid_argument("coordinating_weight: N must be >= 1, got " +
                                std::to_string(n_atoms));
  return arch == Arch::Transformer ? 1.0 / n_atoms : 1.0;
}

std::vector<double> atom_weights(std::span<const int> atom_counts, const DistillConfig& cfg) {
  std::vector<double> w(atom_counts.size());
  for (std::size_t b = 0; b < w.size(); ++b)
    w[b] = cfg.rule == WeightRule::Coordinating ? coordinating_weight(atom_counts[b], cfg.arch)
                                                : cfg.manual_weight;
  return w;
}

DistillTerms compute_terms(const ad::Tensor& pred, const net::LayerTrace& student,
                           const std::optional<net::LayerTrace>& teacher,
                           const mol::GraphBatch& batch, const DistillConfig& cfg) {
  DistillTerms terms;
  terms.l_2d = supervised_l1(pred, batch.labels);
  if (cfg.mode == Mode::None) return terms;
  if (!teacher) throw std::invalid_argument("distill: mode " + std::string(to_string(cfg.mode)) +
                                            " needs a teacher trace");
  if (cfg.mode == Mode::GlobalOnly || cfg.mode == Mode::GlobalLocal)
    terms.l_m = loss_global(student, *teacher, cfg.scope);
  if (cfg.mode == Mode::LocalOnly || cfg.mode == Mode::GlobalLocal)
    terms.l_a_mean =
        loss_local_mean(student, *teacher, batch, cfg.scope, cfg.local_includes_virtual);
  if (cfg.mode == Mode::NaiveAll) terms.naive = loss_naive_all(student, *teacher, batch, cfg.scope);
  return terms;
}

TotalLoss total_loss(const DistillTerms& terms, std::span<const int> atom_counts,
                     const DistillConfig& cfg) {
  cfg.validate();
  TotalLoss out;
  out.total = terms.l_2d;
  out.breakdown.l_2d = terms.l_2d.item();
  auto need = [&](const auto& opt, const char* what) -> const ad::Tensor& {
    if (!opt) throw std::invalid_argument(std::string("total_loss: missing ") + what + " term");
    return *opt;
  };
  switch (cfg.mode) {
    case Mode::None:
      break;
    case Mode::NaiveAll: {
      const ad::Tensor& n = need(terms.naive, "naive");
      out.total = ad::add(out.total, ad::scale(n, cfg.manual_weight));
      out.breakdown.l_a_mean = n.item();
      out.breakdown.weight_mean = cfg.manual_weight;
      break;
    }
    case Mode::GlobalOnly:
    case Mode::LocalOnly:
    case Mode::GlobalLocal: {
      if (cfg.mode != Mode::LocalOnly) {
        const ad::Tensor& lm = need(terms.l_m, "global");
        out.total = ad::add(out.total, lm);
        out.breakdown.l_m = lm.item();
      }
      if (cfg.mode == Mode::GlobalOnly) break;
      const ad::Tensor& la = need(terms.l_a_mean, "local");
      const std::size_t B = la.numel();
      if (cfg.rule == WeightRule::Coordinating && atom_counts.size() != B)
        throw std::invalid_argument("total_loss: coordinating weight needs N for every molecule");
      std::vector<double> w = cfg.rule == WeightRule::Coordinating
                                  ? atom_weights(atom_counts, cfg)
                                  : std::vector<double>(B, cfg.manual_weight);
      double wsum = 0.0, lsum = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        wsum += w[b];
        lsum += la.values()[b];
      }
      out.breakdown.weight_mean = wsum / static_cast<double>(B);
      out.breakdown.l_a_mean = lsum / static_cast<double>(B);
      ad::Tensor weighted = ad::mul(la, la.tape().constant({B}, std::move(w)));
      out.total = ad::add(out.total, ad::mean(weighted));
      break;
    }
  }
  out.breakdown.total = out.total.item();
  return out;
}

}  // namespace ccmd::distill
