#include <gtest/gtest.h>

#include <cmath>

#include "ccmd/batch.hpp"
#include "ccmd/encoder.hpp"
#include "ccmd/model.hpp"

namespace {

using namespace ccmd;
using enc::View;

TEST(Rbf, PeaksAtCentres) {
  enc::RbfConfig cfg;
  for (int k : {0, 5, 31}) EXPECT_DOUBLE_EQ(enc::rbf_expand(cfg.center(k), cfg)[k], 1.0);
}

TEST(Rbf, MidpointIsSymmetric) {
  enc::RbfConfig cfg;
  const double mid = 0.5 * (cfg.center(7) + cfg.center(8));
  auto r = enc::rbf_expand(mid, cfg);
  EXPECT_NEAR(r[7], r[8], 1e-15);
  // Adjacent centres overlap at exp(-1).
  EXPECT_NEAR(enc::rbf_expand(cfg.center(3), cfg)[4], std::exp(-1.0), 1e-12);
}

TEST(Rbf, MatchesFormula) {
  enc::RbfConfig cfg;
  auto r = enc::rbf_expand(0.5, cfg);
  ASSERT_EQ(r.size(), 32u);
  const double dmax = std::sqrt(3.0), gamma = 31.0 * 31.0 / 3.0;
  for (int k = 0; k < 32; ++k) {
    const double mu = dmax * k / 31.0;
    EXPECT_NEAR(r[k], std::exp(-gamma * (0.5 - mu) * (0.5 - mu)), 1e-15);
  }
  EXPECT_THROW(enc::rbf_expand(-0.1, cfg), std::invalid_argument);
}

enc::EncoderConfig small_encoder() {
  enc::EncoderConfig c;
  c.width = 8;
  c.bond_width = 5;
  c.rbf.centers = 10;
  return c;
}

ParamStore encoder_params(View view, std::uint64_t seed) {
  ParamStore s;
  Rng rng(seed);
  enc::init_encoder(s, small_encoder(), view, rng);
  // Give the virtual vector a value so its placement is observable.
  for (auto& v : s.at("enc.virtual").values) v = 0.1;
  return s;
}

std::vector<double> tokens_of(const ParamStore& store, const mol::GraphBatch& batch, View view) {
  ad::Tape tape;
  ParamBinding p(tape, store, false);
  auto t = enc::ape_tokens(p, batch, view, small_encoder());
  return {t.values().begin(), t.values().end()};
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// token_i = E[id_i] + W2 gelu(W1 s_i + b1) + b2 with s_i the summed neighbour features.
std::vector<double> reference_token(const ParamStore& s, const std::vector<double>& feat, int atom_id) {
  const auto cfg = small_encoder();
  const std::size_t d = cfg.width, din = feat.size();
  const auto& w1 = s.at("enc.ape.w1").values;
  const auto& b1 = s.at("enc.ape.b1").values;
  const auto& w2 = s.at("enc.ape.w2").values;
  const auto& b2 = s.at("enc.ape.b2").values;
  const auto& e = s.at("enc.atom_embed").values;
  std::vector<double> h(d), out(d);
  for (std::size_t j = 0; j < d; ++j) {
    double a = b1[j];
    for (std::size_t k = 0; k < din; ++k) a += feat[k] * w1[k * d + j];
    h[j] = gelu(a);
  }
  for (std::size_t j = 0; j < d; ++j) {
    double a = b2[j];
    for (std::size_t k = 0; k < d; ++k) a += h[k] * w2[k * d + j];
    out[j] = e[atom_id * d + j] + a;
  }
  return out;
}

TEST(Encoder, MatchesReferenceBothViews) {
  auto ds = mol::gen_synthetic(3, 3, 7, 21);
  const auto batch = mol::make_batch(std::span<const mol::Molecule>(ds.molecules));
  const auto cfg = small_encoder();
  for (View view : {View::TwoD, View::ThreeD}) {
    auto store = encoder_params(view, 5);
    const auto b = view == View::TwoD ? mol::strip_geometry(batch) : batch;
    auto got = tokens_of(store, b, view);
    const std::size_t d = cfg.width;
    for (std::size_t m = 0; m < b.batch; ++m) {
      const auto& mol = ds.molecules[m];
      for (std::size_t i = 0; i < mol.atoms.size(); ++i) {
        std::vector<double> feat;
        if (view == View::TwoD) {
          const auto& table = store.at("enc.bond_embed").values;
          feat.assign(cfg.bond_width, 0.0);
          for (const auto& bond : mol.bonds)
            if (bond.i == static_cast<int>(i) || bond.j == static_cast<int>(i))
              for (int k = 0; k < cfg.bond_width; ++k) feat[k] += table[bond.type * cfg.bond_width + k];
        } else {
          feat.assign(cfg.rbf.centers, 0.0);
          for (const auto& bond : mol.bonds)
            if (bond.i == static_cast<int>(i) || bond.j == static_cast<int>(i)) {
              const auto& a = (*mol.coords)[bond.i];
              const auto& c = (*mol.coords)[bond.j];
              const double dist = std::hypot(a[0] - c[0], a[1] - c[1], a[2] - c[2]);
              auto r = enc::rbf_expand(dist, cfg.rbf);
              for (int k = 0; k < cfg.rbf.centers; ++k) feat[k] += r[k];
            }
        }
        auto want = reference_token(store, feat, mol.atoms[i]);
        for (std::size_t j = 0; j < d; ++j)
          EXPECT_NEAR(got[(b.token_index(m, i + 1)) * d + j], want[j], 1e-12);
      }
      for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(got[b.token_index(m, 0) * d + j], 0.1);
      for (std::size_t t = mol.atoms.size() + 1; t < b.tokens; ++t)
        for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(got[b.token_index(m, t) * d + j], 0.0);
    }
  }
}

TEST(Encoder, IsolatedAtomGetsEmbeddingPlusMlpOfZero) {
  auto ds = mol::gen_synthetic(1, 2, 2, 1);
  auto batch = mol::make_batch(std::span<const mol::Molecule>(ds.molecules));
  std::fill(batch.bond_types.begin(), batch.bond_types.end(), 0);  // test hook: drop every bond
  auto store = encoder_params(View::TwoD, 9);
  auto got = tokens_of(store, mol::strip_geometry(batch), View::TwoD);
  auto want = reference_token(store, std::vector<double>(small_encoder().bond_width, 0.0), ds.molecules[0].atoms[0]);
  for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[8 + j], want[j], 1e-14);
}

TEST(Encoder, PermutationEquivariant) {
  auto ds = mol::gen_synthetic(1, 6, 6, 3);
  const auto& m = ds.molecules[0];
  std::vector<int> perm{2, 5, 0, 1, 4, 3};
  auto p = mol::permute_atoms(m, perm);
  for (View view : {View::TwoD, View::ThreeD}) {
    auto store = encoder_params(view, 4);
    auto b1 = mol::make_batch(std::span<const mol::Molecule>(&m, 1));
    auto b2 = mol::make_batch(std::span<const mol::Molecule>(&p, 1));
    if (view == View::TwoD) {
      b1 = mol::strip_geometry(b1);
      b2 = mol::strip_geometry(b2);
    }
    auto t1 = tokens_of(store, b1, view), t2 = tokens_of(store, b2, view);
    const std::size_t d = 8;
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(t1[j], t2[j]);
    for (int k = 0; k < 6; ++k)
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(t1[(k + 1) * d + j], t2[(perm[k] + 1) * d + j], 1e-13);
  }
}

TEST(Encoder, SameAtomIdDifferentNeighbourhoodDiffers) {
  // Path 0-1-2-3 with atoms 0 and 1 sharing an id: one is a leaf, one is interior.
  auto m = mol::molecule_from_coords({5, 5, 2, 3}, {{0, 0, 0}, {0.3, 0, 0}, {0.6, 0, 0}, {0.9, 0, 0}}, {});
  auto batch = mol::make_batch(std::span<const mol::Molecule>(&m, 1));
  for (View view : {View::TwoD, View::ThreeD}) {
    auto store = encoder_params(view, 8);
    auto t = tokens_of(store, view == View::TwoD ? mol::strip_geometry(batch) : batch, view);
    double diff = 0;
    for (std::size_t j = 0; j < 8; ++j) diff += std::pow(t[8 + j] - t[16 + j], 2);
    EXPECT_GT(std::sqrt(diff), 1e-6);
  }
}

TEST(Encoder, ThreeDViewNeedsCoordinates) {
  auto ds = mol::gen_synthetic(2, 3, 4, 1);
  auto flat = mol::strip_geometry(mol::make_batch(std::span<const mol::Molecule>(ds.molecules)));
  auto store = encoder_params(View::ThreeD, 1);
  EXPECT_THROW(tokens_of(store, flat, View::ThreeD), std::invalid_argument);
}

TEST(Encoder, Initialisation) {
  ParamStore s;
  Rng rng(1);
  auto cfg = small_encoder();
  cfg.width = 64;
  enc::init_encoder(s, cfg, View::TwoD, rng);
  for (double v : s.at("enc.virtual").values) EXPECT_EQ(v, 0.0);
  const auto& e = s.at("enc.atom_embed").values;
  double sq = 0;
  for (double v : e) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / e.size()), 0.02, 0.003);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.bond_width));
  for (double v : s.at("enc.ape.w1").values) EXPECT_LE(std::abs(v), bound);
  EXPECT_TRUE(s.contains("enc.bond_embed"));
  ParamStore s3;
  enc::init_encoder(s3, cfg, View::ThreeD, rng);
  EXPECT_FALSE(s3.contains("enc.bond_embed"));
}

}  // namespace
