#pragma once

// Simulated real-time deployment.
//
// Lead time is lambda = -t_f. A chunk configuration is feasible when
//   lambda >= tau_sys + tau_jitter   (latency)
//   t_gen(k) <= k                    (throughput)
//
// Simulation timeline (integer nanoseconds, playback origin P = max(lambda, 0)):
//   request_j    = P + (j*k + t_f) * frame     input frame j*k+t_f has arrived
//   start_j      = max(request_j, busy_until_{j-1})
//   busy_until_j = start_j + t_gen(k) + e_j    worker occupancy
//   complete_j   = start_j + tau_sys + e_j     chunk ready for playback
//   deadline_j   = P + j*k * frame             playback reaches frame j*k
// tau_sys is the unloaded sensing-to-rendering latency and already covers
// one inference; e_j is the per-chunk jitter draw. A chunk underruns when
// complete_j > deadline_j.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/common.hpp"
#include "streamacc/streamalign.hpp"
#include "streamacc/tokengrid.hpp"

namespace streamacc {

using Nanos = std::int64_t;

inline constexpr Nanos kNanosPerSecond = 1'000'000'000;
inline constexpr Nanos kFrameNanos = kNanosPerSecond / kFrameRate;

inline Nanos seconds_to_nanos(double s) {
  if (!std::isfinite(s)) throw std::invalid_argument("seconds_to_nanos: non-finite value");
  return static_cast<Nanos>(std::llround(s * 1e9));
}

inline double nanos_to_seconds(Nanos n) { return static_cast<double>(n) / 1e9; }

enum class JitterKind { none, uniform, truncated_normal };

inline std::string jitter_kind_name(JitterKind k) {
  switch (k) {
    case JitterKind::none: return "none";
    case JitterKind::uniform: return "uniform";
    case JitterKind::truncated_normal: return "truncated_normal";
  }
  return "none";
}

inline JitterKind parse_jitter_kind(const std::string& s) {
  if (s == "none") return JitterKind::none;
  if (s == "uniform") return JitterKind::uniform;
  if (s == "truncated_normal" || s == "normal") return JitterKind::truncated_normal;
  throw std::invalid_argument("unknown jitter kind '" + s + "' (none|uniform|truncated_normal)");
}

// Extra delay per chunk in seconds. Uniform draws from [low, high]; the
// truncated normal draws N(mean, stddev) rejected outside [low, high].
struct JitterModel {
  JitterKind kind = JitterKind::none;
  double low = 0.0;
  double high = 0.0;
  double mean = 0.0;
  double stddev = 0.0;

  void validate() const {
    if (kind == JitterKind::none) return;
    if (!(low >= 0.0) || !(high >= low)) throw std::invalid_argument("jitter: need 0 <= low <= high");
    if (kind == JitterKind::truncated_normal) {
      if (!(stddev >= 0.0)) throw std::invalid_argument("jitter: stddev must be >= 0");
      if (stddev == 0.0 && (mean < low || mean > high)) throw std::invalid_argument("jitter: degenerate normal outside bounds");
    }
  }

  Nanos draw(Rng& rng) const {
    switch (kind) {
      case JitterKind::none: return 0;
      case JitterKind::uniform: return seconds_to_nanos(low + (high - low) * uniform01(rng));
      case JitterKind::truncated_normal: {
        if (stddev == 0.0) return seconds_to_nanos(mean);
        std::normal_distribution<double> nd(mean, stddev);
        for (int tries = 0; tries < 1'000'000; ++tries) {
          const double v = nd(rng);
          if (v >= low && v <= high) return seconds_to_nanos(v);
        }
        throw std::runtime_error("jitter: truncated normal acceptance rate too low");
      }
    }
    return 0;
  }
};

struct LatencyProfile {
  double tau_sys = 0.3;     // seconds
  double tau_jitter = 0.1;  // seconds, safety margin
  // t_gen(k) = a + b * k^alpha, k and result in seconds
  double gen_a = 0.01;
  double gen_b = 0.25;
  double gen_alpha = 1.0;
  JitterModel jitter;

  void validate() const {
    if (!(tau_sys > 0.0)) throw std::invalid_argument("profile: tau_sys must be > 0");
    if (!(tau_jitter >= 0.0)) throw std::invalid_argument("profile: tau_jitter must be >= 0");
    if (!(gen_a >= 0.0) || !(gen_b >= 0.0) || !(gen_alpha >= 0.0))
      throw std::invalid_argument("profile: gen-time parameters must be >= 0");
    jitter.validate();
  }

  double gen_seconds(double k_seconds) const { return gen_a + gen_b * std::pow(k_seconds, gen_alpha); }
  Nanos gen_nanos(int k_frames) const { return seconds_to_nanos(gen_seconds(frames_to_seconds(k_frames))); }
};

struct FeasibilityReport {
  bool feasible = false;
  bool latency_ok = false;
  bool throughput_ok = false;
  Nanos latency_margin = 0;     // lambda - tau_sys - tau_jitter
  Nanos throughput_margin = 0;  // k - t_gen(k)
};

inline FeasibilityReport feasible(const StreamSpec& spec, const LatencyProfile& profile) {
  profile.validate();
  spec.validate();
  FeasibilityReport r;
  const Nanos lead = -static_cast<Nanos>(spec.t_f_frames) * kFrameNanos;
  r.latency_margin = lead - seconds_to_nanos(profile.tau_sys) - seconds_to_nanos(profile.tau_jitter);
  r.throughput_margin = static_cast<Nanos>(spec.k_frames) * kFrameNanos - profile.gen_nanos(spec.k_frames);
  r.latency_ok = r.latency_margin >= 0;
  r.throughput_ok = r.throughput_margin >= 0;
  r.feasible = r.latency_ok && r.throughput_ok;
  return r;
}

struct ChunkTiming {
  std::size_t index = 0;
  Nanos request = 0;
  Nanos start = 0;
  Nanos complete = 0;
  Nanos deadline = 0;
  Nanos slack = 0;  // deadline - complete
  bool underrun = false;
};

struct SimTrace {
  StreamSpec spec;
  std::uint64_t seed = 0;
  std::vector<ChunkTiming> chunks;
  std::size_t underruns = 0;
  Nanos max_lateness = 0;  // max(0, complete - deadline)
  double update_rate_hz = 0;

  std::string to_csv() const {
    std::ostringstream o;
    o << "chunk,request_ns,start_ns,complete_ns,deadline_ns,slack_ns,underrun\n";
    for (const auto& c : chunks)
      o << c.index << ',' << c.request << ',' << c.start << ',' << c.complete << ',' << c.deadline << ','
        << c.slack << ',' << (c.underrun ? 1 : 0) << '\n';
    return o.str();
  }
};

inline SimTrace simulate(const StreamSpec& spec, const LatencyProfile& profile, std::size_t chunks, std::uint64_t seed) {
  profile.validate();
  spec.validate();
  if (chunks < 1) throw std::invalid_argument("simulate: chunks must be >= 1");
  SimTrace tr;
  tr.spec = spec;
  tr.seed = seed;
  tr.update_rate_hz = 1.0 / spec.k_seconds();
  tr.chunks.reserve(chunks);

  Rng rng(seed);
  const Nanos frame_k = static_cast<Nanos>(spec.k_frames) * kFrameNanos;
  const Nanos t_f = static_cast<Nanos>(spec.t_f_frames) * kFrameNanos;
  const Nanos origin = std::max<Nanos>(-t_f, 0);
  const Nanos tau_sys = seconds_to_nanos(profile.tau_sys);
  const Nanos t_gen = profile.gen_nanos(spec.k_frames);
  Nanos busy_until = 0;
  for (std::size_t j = 0; j < chunks; ++j) {
    ChunkTiming c;
    c.index = j;
    const Nanos e = profile.jitter.draw(rng);
    c.request = origin + static_cast<Nanos>(j) * frame_k + t_f;
    c.start = std::max(c.request, busy_until);
    busy_until = c.start + t_gen + e;
    c.complete = c.start + tau_sys + e;
    c.deadline = origin + static_cast<Nanos>(j) * frame_k;
    c.slack = c.deadline - c.complete;
    c.underrun = c.complete > c.deadline;
    if (c.underrun) {
      ++tr.underruns;
      tr.max_lateness = std::max(tr.max_lateness, -c.slack);
    }
    tr.chunks.push_back(c);
  }
  return tr;
}

// Probability that a uniform [low, high] jitter draw exceeds `slack`.
inline double uniform_exceedance(double low, double high, double slack) {
  if (high <= low) return low > slack ? 1.0 : 0.0;
  if (slack < low) return 1.0;
  if (slack >= high) return 0.0;
  return (high - slack) / (high - low);
}

struct FeasibilityCell {
  double t_f_seconds = 0;
  double k_seconds = 0;
  StreamSpec spec;
  FeasibilityReport report;
};

// Full-scale sweep grids in seconds.
inline std::vector<double> default_t_f_grid() { return {-4, -2, -1, -0.4, -0.2, 0, 0.2, 0.4, 1, 2, 4}; }
inline std::vector<double> default_k_grid() { return {0.04, 0.1, 0.2, 1, 2}; }

inline std::vector<FeasibilityCell> sweep_feasibility(const std::vector<double>& t_f_seconds,
                                                      const std::vector<double>& k_seconds,
                                                      const LatencyProfile& profile) {
  if (t_f_seconds.empty() || k_seconds.empty()) throw std::invalid_argument("sweep_feasibility: empty grid");
  std::vector<FeasibilityCell> out;
  out.reserve(t_f_seconds.size() * k_seconds.size());
  for (double tf : t_f_seconds)
    for (double k : k_seconds) {
      FeasibilityCell c;
      c.t_f_seconds = tf;
      c.k_seconds = k;
      c.spec = StreamSpec::from_seconds(tf, k);
      c.report = feasible(c.spec, profile);
      out.push_back(c);
    }
  return out;
}

inline std::string feasibility_csv(const std::vector<FeasibilityCell>& cells) {
  std::ostringstream o;
  o << "t_f_seconds,k_seconds,t_f_frames,k_frames,latency_margin_s,throughput_margin_s,latency_ok,throughput_ok,feasible\n";
  for (const auto& c : cells)
    o << fmt_double(c.t_f_seconds, 3) << ',' << fmt_double(c.k_seconds, 3) << ',' << c.spec.t_f_frames << ','
      << c.spec.k_frames << ',' << fmt_double(nanos_to_seconds(c.report.latency_margin), 9) << ','
      << fmt_double(nanos_to_seconds(c.report.throughput_margin), 9) << ',' << (c.report.latency_ok ? 1 : 0) << ','
      << (c.report.throughput_ok ? 1 : 0) << ',' << (c.report.feasible ? 1 : 0) << '\n';
  return o.str();
}

struct GenTimeFit {
  double a = 0, b = 0, alpha = 1;
  double rmse = 0;
};

// Least-squares fit of t = a + b * k^alpha with a, b >= 0. alpha is searched
// on a grid; a and b are solved in closed form for each candidate.
inline GenTimeFit fit_gen_time(const std::vector<double>& k_seconds, const std::vector<double>& t_seconds,
                               double alpha_lo = 0.25, double alpha_hi = 2.0, double alpha_step = 0.005) {
  if (k_seconds.size() != t_seconds.size() || k_seconds.empty())
    throw std::invalid_argument("fit_gen_time: need matching, non-empty samples");
  const double n = static_cast<double>(k_seconds.size());
  GenTimeFit best;
  best.rmse = std::numeric_limits<double>::infinity();
  const int steps = static_cast<int>(std::lround((alpha_hi - alpha_lo) / alpha_step));
  for (int s = 0; s <= steps; ++s) {
    const double alpha = alpha_lo + alpha_step * s;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < k_seconds.size(); ++i) {
      const double x = std::pow(k_seconds[i], alpha);
      sx += x;
      sy += t_seconds[i];
      sxx += x * x;
      sxy += x * t_seconds[i];
    }
    const double det = n * sxx - sx * sx;
    double b = std::abs(det) > 1e-300 ? (n * sxy - sx * sy) / det : 0.0;
    double a = (sy - b * sx) / n;
    if (b < 0) {
      b = 0;
      a = sy / n;
    }
    if (a < 0) {
      a = 0;
      b = sxx > 0 ? std::max(0.0, sxy / sxx) : 0.0;
    }
    double sse = 0;
    for (std::size_t i = 0; i < k_seconds.size(); ++i) {
      const double r = a + b * std::pow(k_seconds[i], alpha) - t_seconds[i];
      sse += r * r;
    }
    const double rmse = std::sqrt(sse / n);
    if (rmse < best.rmse - 1e-15) best = {a, b, alpha, rmse};
  }
  return best;
}

}  // namespace streamacc
