#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "caat/model.hpp"
#include "caat/perf_model.hpp"
#include "caat/transformer.hpp"
#include "support/grad_check.hpp"

using namespace caat;
using namespace caat::perf;

TEST(PerfModel, GemmOpsFormula) {
  const double h = 768, s = 1024;
  EXPECT_EQ(gemm_ops(h, s, 8), (24.0 * 1024 * 768 * 768 + 4.0 * 1024 * 1024 * 768) / 8);
  EXPECT_EQ(gemm_ops(h, s, 1), 2 * gemm_ops(h, s, 2));
  const GemmBreakdown b = gemm_breakdown(h, s, 4);
  EXPECT_EQ(b.mlp, 16 * s * h * h);
  EXPECT_DOUBLE_EQ(b.total(), gemm_ops(h, s, 4));
  EXPECT_THROW(gemm_breakdown(h, s, 0.5), std::invalid_argument);
}

TEST(PerfModel, PayloadFormula) {
  EXPECT_EQ(payload(768, 1024, 0.5), 786432.0);
  EXPECT_EQ(payload(768, 1024, 0.0), 0.0);
}

TEST(PerfModel, SpeedupEndpointsAndMonotonicity) {
  for (double C : {1.0, 100.0, 1e4}) {
    for (double r : {1.0, 2.0, 8.0}) {
      PerfInput in{512, 256, r, C, 1.0};
      EXPECT_EQ(speedup(in), 0.0);
      double prev = 1.0;
      double prev_slope = NAN;
      for (int i = 0; i <= 10; ++i) {
        in.p = i / 10.0;
        const double sp = speedup(in);
        EXPECT_GE(sp, 0.0);
        EXPECT_LT(sp, 1.0);
        EXPECT_LE(sp, prev);
        if (i > 0) {
          const double slope = (sp - prev) / 0.1;
          if (!std::isnan(prev_slope)) EXPECT_NEAR(slope, prev_slope, 1e-9);
          prev_slope = slope;
        }
        prev = sp;
      }
    }
  }
}

TEST(PerfModel, SpeedupMatchesTimeRatio) {
  for (double p : {0.0, 0.1, 0.5, 0.9}) {
    const PerfInput in{768, 1024, 8, 300, p};
    PerfInput full = in;
    full.p = 1.0;
    const double t1 = gemm_ops(in.h, in.s, in.r) / in.C + payload(in.h, in.s, 1.0);
    const double tp = gemm_ops(in.h, in.s, in.r) / in.C + payload(in.h, in.s, p);
    EXPECT_NEAR(speedup(in), (t1 - tp) / t1, 1e-14);
    EXPECT_DOUBLE_EQ(total_time(in), tp);
    EXPECT_DOUBLE_EQ(total_time(full), t1);
  }
}

TEST(PerfModel, OptimalP) {
  EXPECT_EQ(optimal_p(768, 1024, 8, 1000), 1.0);
  EXPECT_DOUBLE_EQ(optimal_p(768, 1024, 8, 1e4), 11264.0 / 80000.0);
  EXPECT_LT(optimal_p(768, 1024, 8, 1e15), 1e-9);
  EXPECT_GT(optimal_p(768, 1024, 8, 1e15), 0.0);
}

TEST(PerfModel, ComputeEqualsCommunicationAtOptimum) {
  for (double C : {5e3, 1e5, 3.7e6}) {
    for (double r : {8.0, 64.0}) {
      const double h = 1024, s = 2048;
      const double ps = optimal_p(h, s, r, C);
      ASSERT_LT(ps, 1.0);
      const double g = gemm_ops(h, s, r) / C;
      const double pp = payload(h, s, ps);
      EXPECT_LT(std::fabs(g - pp) / g, 1e-12);
      // Below p*, communication is cheaper than compute; above it, dearer.
      EXPECT_LT(payload(h, s, 0.5 * ps), g);
      EXPECT_GT(payload(h, s, std::min(1.0, 1.5 * ps)), g);
    }
  }
}

TEST(PerfModel, MaskReduction) {
  const MaskReduction half = mask_comm_reduction(0.5);
  EXPECT_EQ(half.caat, 0.5);
  EXPECT_EQ(half.mask, 0.125);
  EXPECT_EQ(mask_comm_reduction(1.0).caat, 0.0);
  EXPECT_EQ(mask_comm_reduction(1.0).mask, 0.0);
  EXPECT_EQ(mask_comm_reduction(0.0).caat, 1.0);
  EXPECT_EQ(mask_comm_reduction(0.0).mask, 0.25);
  EXPECT_THROW(mask_comm_reduction(1.2), std::invalid_argument);
}

TEST(PerfModel, InputValidation) {
  EXPECT_THROW(speedup({0, 1, 1, 1, 0.5}), std::invalid_argument);
  EXPECT_THROW(speedup({1, 1, 1, 1, -0.1}), std::invalid_argument);
  EXPECT_THROW(speedup({1, 1, 1, 0, 0.5}), std::invalid_argument);
  EXPECT_NO_THROW(speedup({1, 1, 1, 1, 0.0}));
}

TEST(PerfModel, SweepEndpointsMatchDirectCalls) {
  const PerfInput base{768, 1024, 8, 1000, 0.3};
  const auto rows = sweep(base, 11);
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows.front().p, 0.0);
  EXPECT_EQ(rows.back().p, 1.0);
  EXPECT_EQ(rows.back().speedup, 0.0);
  PerfInput zero = base;
  zero.p = 0.0;
  EXPECT_EQ(rows.front().speedup, speedup(zero));
  EXPECT_EQ(rows.front().T, total_time(zero));
  EXPECT_EQ(rows[5].P, payload(768, 1024, 0.5));
  EXPECT_THROW(sweep(base, 1), std::invalid_argument);
}

TEST(PerfModel, SweepFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "caat_test_sweep";
  std::filesystem::create_directories(dir);
  write_sweep_files(dir / "sweep.csv", {768, 1024, 8, 1e4, 1.0}, 5);
  std::ifstream csv(dir / "sweep.csv");
  std::string header, first;
  std::getline(csv, header);
  std::getline(csv, first);
  EXPECT_EQ(header, "p,G,P,T,speedup");
  EXPECT_EQ(first.substr(0, 2), "0,");
  std::ifstream summary(dir / "sweep_summary.csv");
  std::getline(summary, header);
  std::getline(summary, first);
  EXPECT_EQ(header, "h,s,r,C,p_star");
  EXPECT_EQ(first, "768,1024,8,10000,0.1408");
}

TEST(PerfModel, PayloadEqualsLedgerTrafficOfOneLayer) {
  for (double p : {0.0, 0.25, 0.5, 1.0}) {
    ModelConfig cfg = caat::testing::tiny_config(4, p);
    const CaatModel model = CaatModel::init(cfg);
    const std::size_t t = 4;
    RankSet x = RankSet::replicate(Tensor({t, cfg.hidden}, 0.1), cfg.ranks);
    CommLedger ledger;
    ExecContext ctx;
    ctx.ledger = &ledger;
    layer_forward(x, model.layers[0], t, ctx);
    EXPECT_EQ(static_cast<double>(ledger.tensor_parallel(Pass::forward)),
              payload(static_cast<double>(cfg.hidden), static_cast<double>(t), p));
  }
}
