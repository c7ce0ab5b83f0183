#include "caat/perf_model.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace caat::perf {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

void PerfInput::validate() const {
  if (!(h > 0) || !(s > 0) || !(r >= 1) || !(C > 0)) {
    throw std::invalid_argument("h, s, C must be positive and r >= 1");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
}

GemmBreakdown gemm_breakdown(double h, double s, double r) {
  if (!(r >= 1)) throw std::invalid_argument("r must be >= 1");
  return {16 * s * h * h, 6 * s * h * h, 4 * s * s * h, 2 * s * h * h, r};
}

double gemm_ops(double h, double s, double r) { return (24 * s * h * h + 4 * s * s * h) / r; }

double payload(double h, double s, double p) { return 2 * s * h * p; }

double total_time(const PerfInput& in) {
  return gemm_ops(in.h, in.s, in.r) / in.C + payload(in.h, in.s, in.p);
}

double speedup(const PerfInput& in) {
  in.validate();
  return (1 - in.p) / (1 + (12 * in.h + 2 * in.s) / (in.C * in.r));
}

double optimal_p(double h, double s, double r, double C) {
  return std::min((12 * h + 2 * s) / (C * r), 1.0);
}

MaskReduction mask_comm_reduction(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  return {1 - p, (1 - p) / 4};
}

std::vector<SweepRow> sweep(PerfInput base, std::size_t points) {
  if (points < 2) throw std::invalid_argument("sweep needs at least two points");
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < points; ++i) {
    base.p = i + 1 == points ? 1.0 : static_cast<double>(i) / static_cast<double>(points - 1);
    rows.push_back({base.p, gemm_ops(base.h, base.s, base.r), payload(base.h, base.s, base.p),
                    total_time(base), speedup(base)});
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "p,G,P,T,speedup\n";
  for (const auto& r : rows) {
    os << fmt(r.p) << ',' << fmt(r.G) << ',' << fmt(r.P) << ',' << fmt(r.T) << ','
       << fmt(r.speedup) << '\n';
  }
}

void write_sweep_files(const std::filesystem::path& csv_path, const PerfInput& base,
                       std::size_t points) {
  base.validate();
  {
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + csv_path.string());
    write_sweep_csv(os, sweep(base, points));
  }
  auto summary = csv_path;
  summary.replace_filename(csv_path.stem().string() + "_summary.csv");
  std::ofstream os(summary, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + summary.string());
  os << "h,s,r,C,p_star\n"
     << fmt(base.h) << ',' << fmt(base.s) << ',' << fmt(base.r) << ',' << fmt(base.C) << ','
     << fmt(optimal_p(base.h, base.s, base.r, base.C)) << '\n';
}

}  // namespace caat::perf
