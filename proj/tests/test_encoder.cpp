#include "support/gradcheck.hpp"

#include "ltscg/encoder.hpp"
#include "ltscg/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace ltscg::graph {
namespace {

using testing::gradcheck;
using testing::project;
using testing::random_matrix;

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TrajectoryBatch random_batch(int B, int n, int T, int d, Rng& rng) {
  TrajectoryBatch batch(B, n, T, d, 2);
  batch.observations = random_matrix(batch.observations.rows(), d, rng);
  batch.mask.setOnes();
  return batch;
}

EncoderConfig small_config(int d, int T) {
  EncoderConfig c;
  c.obs_dim = d;
  c.window = T;
  c.kernel = 3;
  c.channels = 4;
  c.embedding_dim = 5;
  c.pair_hidden = 6;
  return c;
}

// Direct evaluation of conv-then-linear for one agent trajectory.
Eigen::RowVectorXd conv_linear_oracle(const GraphEncoder& enc, const TrajectoryBatch& batch, int b, int i) {
  const auto& c = enc.config();
  const Matrix& wc = enc.conv().weight().value();
  const Matrix& bc = enc.conv().bias().value();
  const Matrix& wf = enc.fc().weight().value();
  const Matrix& bf = enc.fc().bias().value();
  Eigen::RowVectorXd z = bf.row(0);
  for (int p = 0; p + c.kernel <= c.window; ++p) {
    for (int ch = 0; ch < c.channels; ++ch) {
      double acc = bc(0, ch);
      for (int k = 0; k < c.kernel; ++k) {
        for (int d = 0; d < c.obs_dim; ++d) acc += batch.obs(b, i, p + k, d) * wc(k * c.obs_dim + d, ch);
      }
      const double h = std::max(acc, 0.0);
      for (int e = 0; e < c.embedding_dim; ++e) z(e) += h * wf(p * c.channels + ch, e);
    }
  }
  return z;
}

double pair_oracle(const GraphEncoder& enc, const Eigen::RowVectorXd& zi, const Eigen::RowVectorXd& zj) {
  const Matrix& w1 = enc.pair_hidden().weight().value();
  const Matrix& b1 = enc.pair_hidden().bias().value();
  const Matrix& w2 = enc.pair_out().weight().value();
  const Matrix& b2 = enc.pair_out().bias().value();
  const Eigen::Index d = zi.size();
  double logit = b2(0, 0);
  for (Eigen::Index h = 0; h < w1.cols(); ++h) {
    double acc = b1(0, h);
    for (Eigen::Index k = 0; k < d; ++k) acc += zi(k) * w1(k, h) + zj(k) * w1(d + k, h);
    logit += std::max(acc, 0.0) * w2(h, 0);
  }
  return std::clamp(sigm(logit), 1e-6, 1.0 - 1e-6);
}

TEST(Encoder, ExtractExperienceMatchesDenseOracle) {
  Rng rng(1);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(3, 4), rng);
  const TrajectoryBatch batch = random_batch(1, 2, 4, 3, rng);
  const Matrix z = enc.extract_experience(batch).value();
  ASSERT_EQ(z.rows(), 2);
  for (int i = 0; i < 2; ++i) EXPECT_LT((z.row(i) - conv_linear_oracle(enc, batch, 0, i)).norm(), 1e-12);
}

TEST(Encoder, ZeroTrajectoriesWithZeroBiasGiveZeroEmbedding) {
  Rng rng(2);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(3, 5), rng);
  Var(enc.conv().bias()).mutable_value().setZero();
  Var(enc.fc().bias()).mutable_value().setZero();
  TrajectoryBatch batch(2, 3, 5, 3, 1);
  EXPECT_EQ(enc.extract_experience(batch).value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Encoder, AgentPermutationEquivariance) {
  Rng rng(3);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(2, 4), rng);
  const int n = 4;
  const TrajectoryBatch batch = random_batch(1, n, 4, 2, rng);
  const std::vector<int> perm{2, 0, 3, 1};
  TrajectoryBatch permuted = batch;
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < 4; ++t) permuted.observations.row(permuted.row(0, i, t)) = batch.observations.row(batch.row(0, perm[i], t));
  }
  const Matrix z = enc.extract_experience(batch).value();
  const Matrix zp = enc.extract_experience(permuted).value();
  const Matrix theta = enc.encode(batch).value();
  const Matrix thetap = enc.encode(permuted).value();
  for (int i = 0; i < n; ++i) {
    EXPECT_LT((zp.row(i) - z.row(perm[i])).norm(), 1e-12);
    for (int j = 0; j < n; ++j) EXPECT_NEAR(thetap(i, j), theta(perm[i], perm[j]), 1e-12);
  }
}

TEST(Encoder, PairProbabilitiesMatchOracle) {
  Rng rng(4);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(3, 4), rng);
  const Matrix z = random_matrix(2, 5, rng);
  const Matrix theta = enc.predict_pair_probabilities(ad::constant(z), 2).value();
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(theta(i, j), pair_oracle(enc, z.row(i), z.row(j)), 1e-12);
  }
}

TEST(Encoder, IdenticalEmbeddingsGiveEqualProbabilities) {
  Rng rng(5);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(3, 4), rng);
  const Matrix row = random_matrix(1, 5, rng);
  const Matrix z = row.replicate(4, 1);
  const Matrix theta = enc.predict_pair_probabilities(ad::constant(z), 4).value();
  EXPECT_LT(theta.maxCoeff() - theta.minCoeff(), 1e-15);
}

TEST(Encoder, ProbabilitiesStayInsideClampBand) {
  Rng rng(6);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(3, 4), rng);
  // Large embeddings saturate the sigmoid on many pairs.
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix z = random_matrix(10, 5, rng, -200.0, 200.0);
    const Matrix theta = enc.predict_pair_probabilities(ad::constant(z), 10).value();
    EXPECT_GE(theta.minCoeff(), 1e-6);
    EXPECT_LE(theta.maxCoeff(), 1.0 - 1e-6);
  }
}

TEST(Encoder, WindowShorterThanKernelIsConfigError) {
  Rng rng(7);
  nn::ParameterSet ps;
  EncoderConfig c = small_config(3, 2);
  EXPECT_THROW(GraphEncoder(ps, "enc", c, rng), ConfigError);
  c = small_config(3, 4);
  const GraphEncoder enc(ps, "enc", c, rng);
  EXPECT_THROW(enc.extract_experience(TrajectoryBatch(1, 2, 5, 3, 1)), ConfigError);
}

TEST(Encoder, GradientsOfExtractAndPairPredict) {
  Rng rng(8);
  nn::ParameterSet ps;
  const GraphEncoder enc(ps, "enc", small_config(2, 4), rng);
  const TrajectoryBatch batch = random_batch(2, 3, 4, 2, rng);
  std::vector<Var> params;
  for (const auto& p : ps.entries()) params.push_back(p.var);
  EXPECT_LT(gradcheck([&] { return project(enc.extract_experience(batch)); }, params).max_relative_error, 1e-4);
  Var z = ad::parameter(random_matrix(6, 5, rng));
  std::vector<Var> with_z = params;
  with_z.push_back(z);
  EXPECT_LT(gradcheck([&] { return project(enc.predict_pair_probabilities(z, 3)); }, with_z).max_relative_error,
            1e-4);
}

TEST(Sampler, ZeroLogitAndEqualNoiseGivesHalf) {
  const Var theta = ad::constant(Matrix::Constant(3, 3, 0.5));
  GumbelNoise noise = GumbelNoise::zero(3, 3);
  noise.g1.setConstant(0.7);
  noise.g2.setConstant(0.7);
  for (double s : {0.01, 0.5, 7.0}) {
    const Matrix a = relaxed_bernoulli(theta, s, noise).value();
    EXPECT_LT((a.array() - 0.5).abs().maxCoeff(), 1e-15);
  }
}

TEST(Sampler, MatchesClosedForm) {
  Rng rng(9);
  const Matrix theta = random_matrix(4, 2, rng, 0.05, 0.95);
  const GumbelNoise noise = GumbelNoise::draw(4, 2, rng);
  const double s = 0.3;
  const Matrix a = relaxed_bernoulli(ad::constant(theta), s, noise).value();
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double p = theta.data()[k];
    const double expected = sigm((std::log(p / (1 - p)) + noise.g1.data()[k] - noise.g2.data()[k]) / s);
    EXPECT_NEAR(a.data()[k], expected, 1e-14);
  }
}

TEST(Sampler, DiagonalForcedToOneAndEntriesInsideUnitInterval) {
  Rng rng(10);
  const Matrix theta = random_matrix(6, 3, rng, 0.01, 0.99);
  const Matrix a = sample_adjacency(ad::constant(theta), 0.5, rng).value();
  for (int r = 0; r < 6; ++r) {
    for (int j = 0; j < 3; ++j) {
      if (j == r % 3) {
        EXPECT_EQ(a(r, j), 1.0);
      } else {
        EXPECT_GT(a(r, j), 0.0);
        EXPECT_LT(a(r, j), 1.0);
      }
    }
  }
}

TEST(Sampler, ThresholdFrequencyEqualsTheta) {
  Rng rng(11);
  const int draws = 10000;
  for (double p : {0.1, 0.5, 0.9}) {
    for (double s : {0.1, 0.5, 2.0}) {
      const Var theta = ad::constant(Matrix::Constant(1, 1, p));
      int hits = 0;
      for (int k = 0; k < draws; ++k) hits += relaxed_bernoulli(theta, s, GumbelNoise::draw(1, 1, rng)).scalar() > 0.5;
      EXPECT_NEAR(static_cast<double>(hits) / draws, p, 0.02) << "theta " << p << " s " << s;
    }
  }
}

TEST(Sampler, LowTemperatureIsNearlyBinary) {
  Rng rng(12);
  const Var theta = ad::constant(Matrix::Constant(1, 1, 0.9));
  int binary = 0, ones = 0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const double a = relaxed_bernoulli(theta, 1e-6, GumbelNoise::draw(1, 1, rng)).scalar();
    binary += a < 1e-3 || a > 1 - 1e-3;
    ones += a > 0.5;
  }
  EXPECT_GE(binary, static_cast<int>(0.99 * draws));
  EXPECT_NEAR(static_cast<double>(ones) / draws, 0.9, 0.01);
}

TEST(Sampler, NonPositiveTemperatureIsConfigError) {
  Rng rng(13);
  const Var theta = ad::constant(Matrix::Constant(2, 2, 0.3));
  EXPECT_THROW(sample_adjacency(theta, 0.0, rng), ConfigError);
  EXPECT_THROW(relaxed_bernoulli(theta, -1.0, GumbelNoise::zero(2, 2)), ConfigError);
}

TEST(Sampler, ReparameterizationGradientIsElementwise) {
  Rng rng(14);
  Var theta = ad::parameter(random_matrix(3, 3, rng, 0.1, 0.9));
  const GumbelNoise noise = GumbelNoise::draw(3, 3, rng);
  EXPECT_LT(gradcheck([&] { return project(sample_adjacency(theta, 0.5, noise)); }, {theta}).max_relative_error, 1e-4);
  // Perturbing one theta entry moves only the matching adjacency entry.
  const Matrix base = relaxed_bernoulli(theta, 0.5, noise).value();
  theta.mutable_value()(1, 2) += 1e-3;
  const Matrix moved = relaxed_bernoulli(theta, 0.5, noise).value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == 1 && j == 2) {
        EXPECT_NE(moved(i, j), base(i, j));
      } else {
        EXPECT_EQ(moved(i, j), base(i, j));
      }
    }
  }
}

TEST(HardAdjacency, StrictThresholdAndUnitDiagonalVariant) {
  Matrix theta = Matrix::Constant(4, 2, 0.5);
  EXPECT_EQ(hard_adjacency(theta).sum(), 0.0);
  theta(0, 1) = 0.7;
  theta(3, 0) = 0.5000001;
  const Matrix hard = hard_adjacency(theta);
  EXPECT_EQ(hard(0, 1), 1.0);
  EXPECT_EQ(hard(3, 0), 1.0);
  EXPECT_EQ(hard.sum(), 2.0);
  const Matrix eval = evaluation_adjacency(theta);
  for (int r = 0; r < 4; ++r) EXPECT_EQ(eval(r, r % 2), 1.0);
  EXPECT_EQ(eval(3, 0), 1.0);
}

TEST(HardAdjacency, EqualsMajorityVoteOfSampledThresholds) {
  Rng rng(15);
  const Matrix theta = (Matrix(3, 3) << 0.2, 0.8, 0.45, 0.55, 0.05, 0.62, 0.38, 0.95, 0.7).finished();
  Matrix votes = Matrix::Zero(3, 3);
  for (int k = 0; k < 10000; ++k) {
    votes += hard_adjacency(relaxed_bernoulli(ad::constant(theta), 0.5, GumbelNoise::draw(3, 3, rng)).value());
  }
  EXPECT_EQ(hard_adjacency(votes / 10000.0), hard_adjacency(theta));
}

TEST(TrajectoryBatch, PaddingZeroesMaskedRows) {
  Rng rng(16);
  TrajectoryBatch batch = random_batch(2, 2, 4, 3, rng);
  batch.states = random_matrix(8, 2, rng);
  batch.mask(1, 2) = batch.mask(1, 3) = 0.0;
  batch.apply_padding();
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(batch.observations.row(batch.row(1, i, 2)).norm(), 0.0);
    EXPECT_EQ(batch.observations.row(batch.row(1, i, 3)).norm(), 0.0);
    EXPECT_NE(batch.observations.row(batch.row(0, i, 3)).norm(), 0.0);
  }
  EXPECT_EQ(batch.states.row(1 * 4 + 3).norm(), 0.0);
  EXPECT_EQ(batch.agent_mask(3), (ad::ColVector(4) << 1, 1, 0, 0).finished());
}

}  // namespace
}  // namespace ltscg::graph
