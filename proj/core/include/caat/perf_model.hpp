#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

namespace caat::perf {

/// Hidden size, sequence length, tensor-parallel width, compute/communication
/// ratio and synchronization factor. C is FLOP per communicated element, so
/// time is T = G / C + P in units of element transfers.
struct PerfInput {
  double h = 0;
  double s = 0;
  double r = 1;
  double C = 1;
  double p = 1;

  /// Throws std::invalid_argument unless all positive and p in [0, 1].
  void validate() const;
};

/// Per-rank GEMM FLOPs of one layer's forward pass, batch size 1.
struct GemmBreakdown {
  double mlp = 0;        // 16 s h^2
  double qkv = 0;        // 6 s h^2
  double attention = 0;  // 4 s^2 h
  double out_proj = 0;   // 2 s h^2
  double r = 1;
  double total() const { return (mlp + qkv + attention + out_proj) / r; }
};

GemmBreakdown gemm_breakdown(double h, double s, double r);
double gemm_ops(double h, double s, double r);
/// Elements each rank sends per layer forward (two block-output reduces).
double payload(double h, double s, double p);
double total_time(const PerfInput& in);
/// (T(1) - T(p)) / T(1).
double speedup(const PerfInput& in);
double optimal_p(double h, double s, double r, double C);

struct MaskReduction {
  double caat = 0;
  double mask = 0;
};
/// Fractional reduction of total tensor-parallel traffic for CAAT and for a
/// Top-K/random mask at the same p.
MaskReduction mask_comm_reduction(double p);

struct SweepRow {
  double p, G, P, T, speedup;
};
/// `points` evenly spaced p values over [0, 1], endpoints included.
std::vector<SweepRow> sweep(PerfInput base, std::size_t points);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);
/// Writes `<stem>.csv` and the one-row `<stem>_summary.csv` holding p*.
void write_sweep_files(const std::filesystem::path& csv_path, const PerfInput& base,
                       std::size_t points);

}  // namespace caat::perf
