#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ccmd/distill.hpp"
#include "ccmd/gradscan.hpp"

namespace {

using namespace ccmd;
using namespace ccmd::scan;

std::vector<std::pair<double, double>> curve(double (*f)(double)) {
  std::vector<std::pair<double, double>> pts;
  for (double n : {8.0, 16.0, 32.0, 64.0, 128.0}) pts.emplace_back(n, f(n));
  return pts;
}

TEST(LogLogFit, RecoversPowerLaws) {
  auto sq = fit_loglog(curve([](double n) { return n * n; }));
  EXPECT_NEAR(sq.slope, 2.0, 1e-9);
  EXPECT_NEAR(sq.intercept, 0.0, 1e-9);
  EXPECT_NEAR(sq.r2, 1.0, 1e-12);
  EXPECT_EQ(sq.points, 5u);
  auto lin = fit_loglog(curve([](double n) { return 3.0 * n; }));
  EXPECT_NEAR(lin.slope, 1.0, 1e-9);
  EXPECT_NEAR(lin.intercept, std::log(3.0), 1e-9);
  auto flat = fit_loglog(curve([](double) { return 0.7; }));
  EXPECT_NEAR(flat.slope, 0.0, 1e-12);
}

TEST(LogLogFit, MatchesClosedFormOnNoisyData) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 30; ++i) pts.emplace_back(2.0 + i * 3.0, u(rng) * std::pow(2.0 + i * 3.0, 0.7));
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  const double n = pts.size();
  for (auto [a, b] : pts) {
    const double x = std::log(a), y = std::log(b);
    sx += x, sy += y, sxx += x * x, sxy += x * y, syy += y * y;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double icpt = (sy - slope * sx) / n;
  const double r = (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  auto f = fit_loglog(pts);
  EXPECT_NEAR(f.slope, slope, 1e-10);
  EXPECT_NEAR(f.intercept, icpt, 1e-10);
  EXPECT_NEAR(f.r2, r * r, 1e-10);
}

TEST(LogLogFit, RejectsBadInput) {
  using P = std::vector<std::pair<double, double>>;
  EXPECT_THROW(fit_loglog(P{{4, 1.0}, {4, 2.0}}), std::invalid_argument);
  EXPECT_THROW(fit_loglog(P{{4, 1.0}, {8, 0.0}}), std::invalid_argument);
  EXPECT_THROW(fit_loglog(P{{4, 1.0}, {8, std::nan("")}}), std::invalid_argument);
  EXPECT_THROW(fit_loglog(P{{0, 1.0}, {8, 1.0}}), std::invalid_argument);
  EXPECT_THROW(fit_loglog(P{}), std::invalid_argument);
}

TEST(GradScan, MiddleLayers) {
  EXPECT_EQ(middle_layers(4), (std::vector<int>{2, 3}));
  EXPECT_EQ(middle_layers(3), (std::vector<int>{2}));
  EXPECT_EQ(middle_layers(2), (std::vector<int>{1, 2}));
  EXPECT_EQ(middle_layers(1), (std::vector<int>{1}));
}

ModelConfig probe_model(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.width = 8;
  c.layers = 3;
  c.heads = 2;
  c.ffn = 16;
  c.encoder.bond_width = 4;
  return c;
}

class ProbeTest : public ::testing::TestWithParam<Arch> {
 protected:
  void SetUp() override {
    model = probe_model(GetParam());
    student = init_model(model, 1);
    teacher = perturb(student, 0.1, 2);
  }
  Probe probe(Weighting w = Weighting::Summed) { return {model, &student, &teacher, w, true}; }
  ModelConfig model;
  ParamStore student, teacher;
};

TEST_P(ProbeTest, IdenticalTeacherGivesZeroGradient) {
  Probe p{model, &student, &student, Weighting::Summed, true};
  auto m = mol::gen_synthetic(1, 9, 9, 5).molecules[0];
  for (const auto& g : virtual_grads(p, m))
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST_P(ProbeTest, NormIsAtomPermutationInvariant) {
  auto m = mol::gen_synthetic(1, 8, 8, 6).molecules[0];
  std::vector<int> perm{3, 7, 1, 0, 6, 2, 5, 4};
  auto a = virtual_grad_norms(probe(), m);
  auto b = virtual_grad_norms(probe(), mol::permute_atoms(m, perm));
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_NEAR(a[l], b[l], 1e-10 * std::max(1.0, a[l]));
}

TEST_P(ProbeTest, GradientMatchesFiniteDifferences) {
  auto m = mol::gen_synthetic(1, 7, 7, 8).molecules[0];
  const auto p = probe();
  auto grads = virtual_grads(p, m);
  const std::size_t d = model.width;
  const double h = 1e-6;
  for (std::size_t layer = 1; layer <= grads.size(); ++layer)
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> up(d, 0.0), down(d, 0.0);
      up[j] = h;
      down[j] = -h;
      const double fd = (probe_loss(p, m, layer, up) - probe_loss(p, m, layer, down)) / (2 * h);
      const double an = grads[layer - 1][j];
      EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}), 1e-4)
          << "layer " << layer << " component " << j << " fd " << fd << " analytic " << an;
    }
}

TEST_P(ProbeTest, CoordinatedNormIsExactRescale) {
  for (int n : {4, 12, 30}) {
    auto m = mol::gen_synthetic(1, n, n, 10 + n).molecules[0];
    auto a = virtual_grad_norms(probe(), m);
    auto b = virtual_grad_norms(probe(Weighting::Coordinated), m);
    const double factor = distill::coordinating_weight(n, model.arch) / (n + 1.0);
    for (std::size_t l = 0; l < a.size(); ++l) EXPECT_NEAR(b[l], a[l] * factor, 1e-12 * a[l]);
  }
}

TEST_P(ProbeTest, LayerOutOfRange) {
  auto m = mol::gen_synthetic(1, 4, 4, 1).molecules[0];
  EXPECT_THROW(virtual_grad_norm(probe(), m, 0), std::out_of_range);
  EXPECT_THROW(virtual_grad_norm(probe(), m, 4), std::out_of_range);
  EXPECT_NO_THROW(virtual_grad_norm(probe(), m, 3));
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(probe_loss(probe(), m, 1, wrong), std::invalid_argument);
}

INSTANTIATE_TEST_SUITE_P(Both, ProbeTest, ::testing::Values(Arch::Transformer, Arch::Gin),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(GradScan, PerturbIsSeededAndScaled) {
  auto s = init_model(probe_model(Arch::Gin), 1);
  auto a = perturb(s, 0.1, 5), b = perturb(s, 0.1, 5), c = perturb(s, 0.1, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  double ss = 0;
  std::size_t n = 0;
  for (const auto& [name, p] : a)
    for (std::size_t i = 0; i < p.values.size(); ++i, ++n) {
      const double e = p.values[i] - s.at(name).values[i];
      ss += e * e;
    }
  EXPECT_NEAR(std::sqrt(ss / n), 0.1, 0.01);
}

ScanConfig small_scan() {
  ScanConfig c;
  c.sizes = {4, 8, 16};
  c.seeds = 2;
  c.molecules_per_cell = 3;
  c.width = 8;
  c.layers = 4;
  c.heads = 2;
  c.ffn = 16;
  return c;
}

double ols_slope(const std::vector<int>& sizes, double (*g)(double)) {
  std::vector<std::pair<double, double>> pts;
  for (int n : sizes) pts.emplace_back(n, g(n));
  return fit_loglog(pts).slope;
}

TEST(GradScan, SmallScanInvariants) {
  const auto cfg = small_scan();
  auto r = scaling_scan(cfg);
  EXPECT_TRUE(r.dropped.empty());
  ASSERT_EQ(r.rows.size(), 2u * 3u * 2u * 4u);
  for (const auto& row : r.rows) {
    EXPECT_GT(row.norm, 0.0);
    EXPECT_GE(row.layer, 1);
    EXPECT_LE(row.layer, 4);
    const double f = distill::coordinating_weight(row.n, row.arch) / (row.n + 1.0);
    EXPECT_NEAR(row.weighted_norm, row.norm * f, 1e-10 * row.norm);
  }
  ASSERT_EQ(r.fits.size(), 2u);
  for (const auto& f : r.fits) {
    EXPECT_EQ(f.pooled_layers, (std::vector<int>{2, 3}));
    EXPECT_EQ(f.per_layer.size(), 4u);
    EXPECT_EQ(f.pooled.points, 6u);
  }
  // The coordinated loss rescales every norm by f(N) / (N + 1), so the pooled
  // slope drops by exactly the log-log slope of that factor.
  const double tf_drop = ols_slope(cfg.sizes, [](double n) { return n * (n + 1); });
  const double gin_drop = ols_slope(cfg.sizes, [](double n) { return n + 1; });
  EXPECT_NEAR(r.fit(Arch::Transformer).pooled.slope - r.fit(Arch::Transformer).pooled_weighted.slope, tf_drop, 1e-9);
  EXPECT_NEAR(r.fit(Arch::Gin).pooled.slope - r.fit(Arch::Gin).pooled_weighted.slope, gin_drop, 1e-9);

  auto again = scaling_scan(cfg);
  ASSERT_EQ(again.rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) EXPECT_EQ(again.rows[i].norm, r.rows[i].norm);

  std::ostringstream csv;
  write_csv(r, csv);
  std::string header;
  std::istringstream in(csv.str());
  std::getline(in, header);
  EXPECT_EQ(header, "arch,N,seed,layer,norm");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, r.rows.size());

  auto j = summary_json(r);
  EXPECT_NEAR(j["fits"]["transformer"]["slope_drop"].get<double>(), tf_drop, 1e-9);
  EXPECT_TRUE(j.contains("slope_gap"));
}

TEST(GradScan, ExcludingVirtualMakesGinDropExactlyOne) {
  auto cfg = small_scan();
  cfg.archs = {Arch::Gin};
  cfg.include_virtual = false;
  cfg.seeds = 1;
  auto r = scaling_scan(cfg);
  EXPECT_NEAR(r.fit(Arch::Gin).pooled.slope - r.fit(Arch::Gin).pooled_weighted.slope, 1.0, 1e-9);
  EXPECT_THROW(r.fit(Arch::Transformer), std::out_of_range);
}

TEST(GradScan, ConfigValidation) {
  auto c = small_scan();
  c.sizes = {8};
  EXPECT_THROW(scaling_scan(c), std::invalid_argument);
  c = small_scan();
  c.teacher_noise = 0;
  EXPECT_THROW(scaling_scan(c), std::invalid_argument);
  c = small_scan();
  c.seeds = 0;
  EXPECT_THROW(scaling_scan(c), std::invalid_argument);
}

}  // namespace
