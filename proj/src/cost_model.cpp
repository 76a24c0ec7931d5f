#include "muxsim/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "muxsim/errors.hpp"

namespace muxsim {

std::string_view to_string(Phase phase) { return phase == Phase::Prefill ? "prefill" : "decode"; }

Phase phase_from_string(std::string_view name) {
  if (name == "prefill") return Phase::Prefill;
  if (name == "decode") return Phase::Decode;
  throw SchemaError("unknown phase: " + std::string(name));
}

// ---------------------------------------------------------------------------
// Solo-run predictors

PrefillFeatures PrefillFeatures::of(std::span<const PrefillItem> batch) {
  PrefillFeatures f;
  for (const auto& item : batch) f.add(item);
  return f;
}

void PrefillFeatures::add(const PrefillItem& item) {
  const auto n = static_cast<double>(item.n);
  const auto r = static_cast<double>(item.r);
  sum_n2 += n * n;
  sum_nr += n * r;
  sum_n += n;
}

double prefill_us(const PrefillFeatures& f, const PrefillTheta& theta) {
  return theta.t[0] * f.sum_n2 + theta.t[1] * f.sum_nr + theta.t[2] * f.sum_n + theta.t[3];
}

double decode_us(double sum_r, std::int64_t bs, const DecodeTheta& theta) {
  return theta.t[0] * sum_r + theta.t[1] * static_cast<double>(bs) + theta.t[2];
}

SimTime predict_prefill(std::span<const PrefillItem> batch, const PrefillTheta& theta) {
  if (batch.empty()) throw EmptyBatch("predict_prefill on an empty batch");
  return static_cast<SimTime>(std::llround(prefill_us(PrefillFeatures::of(batch), theta)));
}

SimTime predict_decode(std::span<const Tokens> reused, const DecodeTheta& theta) {
  if (reused.empty()) throw EmptyBatch("predict_decode on an empty batch");
  double sum = 0;
  for (Tokens r : reused) sum += static_cast<double>(r);
  return static_cast<SimTime>(
      std::llround(decode_us(sum, static_cast<std::int64_t>(reused.size()), theta)));
}

const PrefillTheta& LatencyCoeffs::prefill_at(int sms) const {
  auto it = prefill.find(sms);
  if (it == prefill.end()) throw ConfigError("no prefill coefficients for " + std::to_string(sms) + " SMs");
  return it->second;
}

const DecodeTheta& LatencyCoeffs::decode_at(int sms) const {
  auto it = decode.find(sms);
  if (it == decode.end()) throw ConfigError("no decode coefficients for " + std::to_string(sms) + " SMs");
  return it->second;
}

// ---------------------------------------------------------------------------
// Fitting

std::vector<double> nnls(const std::vector<double>& a_flat, std::size_t rows, std::size_t cols,
                         const std::vector<double>& b_flat) {
  using Eigen::Index;
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
      a_flat.data(), static_cast<Index>(rows), static_cast<Index>(cols));
  const Eigen::Map<const Eigen::VectorXd> b(b_flat.data(), static_cast<Index>(rows));
  const auto n = static_cast<Index>(cols);

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(cols, false);
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * a.cwiseAbs().maxCoeff() *
                     static_cast<double>(std::max(rows, cols));

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<Index> idx;
    for (Index j = 0; j < n; ++j) {
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    }
    Eigen::MatrixXd ap(a.rows(), static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) ap.col(static_cast<Index>(k)) = a.col(idx[k]);
    const Eigen::VectorXd zp = ap.colPivHouseholderQr().solve(b);
    z.setZero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zp(static_cast<Index>(k));
  };

  for (std::size_t outer = 0; outer < 3 * cols + 10; ++outer) {
    const Eigen::VectorXd w = a.transpose() * (b - a * x);
    Index best = -1;
    double best_w = tol;
    for (Index j = 0; j < n; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best_w) {
        best_w = w(j);
        best = j;
      }
    }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;

    Eigen::VectorXd z;
    for (std::size_t inner = 0; inner < 3 * cols + 10; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) feasible = false;
      }
      if (feasible) break;
      double alpha = 1.0;
      for (Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) {
          alpha = std::min(alpha, x(j) / (x(j) - z(j)));
        }
      }
      x += alpha * (z - x);
      for (Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0;
        }
      }
    }
    x = z;
  }
  return {x.data(), x.data() + n};
}

namespace {

std::vector<double> feature_row(const ProfileSample& s, Phase phase) {
  if (phase == Phase::Prefill) {
    const auto f = PrefillFeatures::of(s.prefill);
    return {f.sum_n2, f.sum_nr, f.sum_n, 1.0};
  }
  double sum_r = 0;
  for (Tokens r : s.decode_r) sum_r += static_cast<double>(r);
  return {sum_r, static_cast<double>(s.decode_r.size()), 1.0};
}

}  // namespace

FitResult fit(std::span<const ProfileSample> samples, Phase phase, int sms) {
  std::vector<const ProfileSample*> picked;
  for (const auto& s : samples) {
    if (s.phase != phase || s.sms != sms || s.peer) continue;
    if (!(s.latency_us > 0)) throw SchemaError("profile sample latency must be positive");
    if (phase == Phase::Prefill ? s.prefill.empty() : s.decode_r.empty()) {
      throw EmptyBatch("profile sample with an empty batch");
    }
    picked.push_back(&s);
  }
  const std::size_t k = phase == Phase::Prefill ? 4 : 3;
  if (picked.size() < k) {
    throw Degenerate("need at least " + std::to_string(k) + " samples, got " +
                     std::to_string(picked.size()));
  }

  const bool holdout = picked.size() >= 2 * k + 2;
  std::vector<const ProfileSample*> train;
  std::vector<const ProfileSample*> test;
  for (std::size_t i = 0; i < picked.size(); ++i) {
    (holdout && i % 5 == 4 ? test : train).push_back(picked[i]);
  }
  if (!holdout) test = train;

  // Rows are weighted by 1/latency so the fit minimises relative error;
  // columns are scaled to unit max for conditioning.
  const std::size_t m = train.size();
  std::vector<double> a(m * k);
  std::vector<double> b(m);
  std::vector<double> scale(k, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = feature_row(*train[i], phase);
    const double w = 1.0 / train[i]->latency_us;
    for (std::size_t j = 0; j < k; ++j) {
      a[i * k + j] = row[j] * w;
      scale[j] = std::max(scale[j], std::abs(a[i * k + j]));
    }
    b[i] = 1.0;
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (scale[j] == 0) throw Degenerate("feature column " + std::to_string(j) + " is identically zero");
    for (std::size_t i = 0; i < m; ++i) a[i * k + j] /= scale[j];
  }
  {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> am(
        a.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(am);
    qr.setThreshold(1e-10);
    if (static_cast<std::size_t>(qr.rank()) < k) throw Degenerate("rank-deficient design matrix");
  }

  std::vector<double> theta = nnls(a, m, k, b);
  for (std::size_t j = 0; j < k; ++j) theta[j] /= scale[j];

  FitResult result;
  result.theta = theta;
  result.train_count = train.size();
  result.holdout_count = holdout ? test.size() : 0;
  for (const auto* s : test) {
    const auto row = feature_row(*s, phase);
    double pred = 0;
    for (std::size_t j = 0; j < k; ++j) pred += theta[j] * row[j];
    result.max_holdout_deviation =
        std::max(result.max_holdout_deviation, std::abs(pred - s->latency_us) / s->latency_us);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Contention guard

std::size_t GuardAxes::cell_count() const {
  return prefill_n.size() * prefill_r.size() * decode_r.size() * batch_sizes.size() *
         partitions.size();
}

GuardAxes default_guard_axes(std::vector<int> partitions) {
  GuardAxes axes;
  axes.partitions = std::move(partitions);
  return axes;
}

std::size_t bin_ceiling(std::span<const std::int64_t> points, std::int64_t value) {
  const auto it = std::lower_bound(points.begin(), points.end(), value);
  if (it == points.end()) return points.size() - 1;
  return static_cast<std::size_t>(it - points.begin());
}

ContentionGuard::ContentionGuard(GuardAxes axes, double cap, bool cap_override, DecodeKey key)
    : axes_(std::move(axes)), cap_(cap), cap_override_(cap_override), key_(key) {
  if (cap_ < 1.0) throw ConfigError("guard cap must be >= 1");
  cells_.assign(axes_.cell_count(), 0.0);
}

GuardCell ContentionGuard::cell(Tokens prefill_n, Tokens prefill_r, Tokens decode_key_value,
                                std::int64_t bs, std::size_t partition_index) const {
  GuardCell c;
  c.prefill_n = bin_ceiling(axes_.prefill_n, prefill_n);
  c.prefill_r = bin_ceiling(axes_.prefill_r, prefill_r);
  c.decode_r = bin_ceiling(axes_.decode_r, decode_key_value);
  c.bs = bin_ceiling(axes_.batch_sizes, bs);
  c.partition = std::min(partition_index, axes_.partitions.empty() ? 0 : axes_.partitions.size() - 1);
  return c;
}

std::size_t ContentionGuard::flat(const GuardCell& c) const {
  std::size_t idx = c.prefill_n;
  idx = idx * axes_.prefill_r.size() + c.prefill_r;
  idx = idx * axes_.decode_r.size() + c.decode_r;
  idx = idx * axes_.batch_sizes.size() + c.bs;
  idx = idx * axes_.partitions.size() + c.partition;
  return idx;
}

GuardCell ContentionGuard::unflat(std::size_t index) const {
  GuardCell c;
  c.partition = index % axes_.partitions.size();
  index /= axes_.partitions.size();
  c.bs = index % axes_.batch_sizes.size();
  index /= axes_.batch_sizes.size();
  c.decode_r = index % axes_.decode_r.size();
  index /= axes_.decode_r.size();
  c.prefill_r = index % axes_.prefill_r.size();
  c.prefill_n = index / axes_.prefill_r.size();
  return c;
}

double ContentionGuard::max_slowdown(const GuardCell& c) const {
  const double v = cells_[flat(c)];
  return v > 0 ? v : cap_;
}

bool ContentionGuard::populated(const GuardCell& c) const { return cells_[flat(c)] > 0; }

void ContentionGuard::set(const GuardCell& c, double factor) { cells_[flat(c)] = std::max(1.0, factor); }

double ContentionGuard::clamp_observation(double observed) const {
  const double v = std::max(1.0, observed);
  return cap_override_ ? v : std::min(v, cap_);
}

void ContentionGuard::refine(const GuardCell& c, double observed) {
  double& cell = cells_[flat(c)];
  const double v = clamp_observation(observed);
  cell = cell > 0 ? std::max(cell, v) : v;
}

std::size_t ContentionGuard::populated_count() const {
  return static_cast<std::size_t>(std::count_if(cells_.begin(), cells_.end(), [](double v) { return v > 0; }));
}

SimTime inflate(SimTime solo_us, double factor) {
  const double product = static_cast<double>(solo_us) * factor;
  return static_cast<SimTime>(std::ceil(product - 1e-6));
}

WorstCaseEstimate worst_case_decode(double sum_r, Tokens max_r, std::int64_t bs,
                                    std::size_t partition_index, const DecodeTheta& theta,
                                    const ContentionGuard& guard,
                                    const std::optional<PrefillDescriptor>& corun) {
  if (bs < 1) throw EmptyBatch("worst_case_decode on an empty batch");
  WorstCaseEstimate est;
  est.solo_us = static_cast<SimTime>(std::llround(decode_us(sum_r, bs, theta)));
  if (corun) {
    const Tokens key = guard.decode_key() == DecodeKey::MaxReused ? max_r : static_cast<Tokens>(sum_r);
    est.factor = guard.max_slowdown(guard.cell(corun->n, corun->r, key, bs, partition_index));
  }
  est.worst_us = inflate(est.solo_us, est.factor);
  return est;
}

WorstCaseEstimate worst_case_decode(std::span<const Tokens> reused, std::size_t partition_index,
                                    const DecodeTheta& theta, const ContentionGuard& guard,
                                    const std::optional<PrefillDescriptor>& corun) {
  double sum = 0;
  Tokens max_r = 0;
  for (Tokens r : reused) {
    sum += static_cast<double>(r);
    max_r = std::max(max_r, r);
  }
  return worst_case_decode(sum, max_r, static_cast<std::int64_t>(reused.size()), partition_index,
                           theta, guard, corun);
}

std::vector<ProfilePoint> gen_profile_plan(const GuardAxes& axes) {
  std::vector<ProfilePoint> plan;
  const std::size_t top_n = axes.prefill_n.size() - 1;
  const std::size_t top_r = axes.prefill_r.size() - 1;
  for (int part : axes.partitions) {
    for (std::size_t i = 0; i < axes.prefill_n.size(); ++i) {
      for (std::size_t j = 0; j < axes.prefill_r.size(); ++j) {
        // The (top, top) cell exceeds the largest context window; only
        // skipped when the grid actually has more than one point per axis.
        if (i == top_n && j == top_r && (top_n > 0 || top_r > 0)) continue;
        for (Tokens dr : axes.decode_r) {
          for (std::int64_t bs : axes.batch_sizes) {
            plan.push_back(ProfilePoint{part, axes.prefill_n[i], axes.prefill_r[j], dr, bs});
          }
        }
      }
    }
  }
  return plan;
}

void write_profile_plan(std::ostream& out, const std::vector<ProfilePoint>& plan) {
  for (const auto& p : plan) {
    nlohmann::ordered_json j;
    j["phase"] = "corun";
    j["partition"] = p.partition;
    j["n"] = p.prefill_n;
    j["r"] = p.prefill_r;
    j["decode_r"] = p.decode_r;
    j["bs"] = p.bs;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Calibration file

namespace {

constexpr const char* kCalibrationFormat = "muxsim-calibration";
constexpr int kCalibrationVersion = 1;

}  // namespace

void write_calibration(std::ostream& out, const Calibration& cal) {
  const GuardAxes& axes = cal.guard.axes();
  nlohmann::ordered_json header;
  header["record"] = "header";
  header["format"] = kCalibrationFormat;
  header["version"] = kCalibrationVersion;
  out << header.dump() << '\n';

  nlohmann::ordered_json ax;
  ax["record"] = "axes";
  ax["prefill_n"] = axes.prefill_n;
  ax["prefill_r"] = axes.prefill_r;
  ax["decode_r"] = axes.decode_r;
  ax["batch_sizes"] = axes.batch_sizes;
  ax["partitions"] = axes.partitions;
  ax["cap"] = cal.guard.cap();
  ax["cap_override"] = cal.guard.cap_override();
  ax["decode_key"] = cal.guard.decode_key() == DecodeKey::MaxReused ? "max_reused" : "total_reused";
  out << ax.dump() << '\n';

  const auto& raw = cal.guard.raw();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] <= 0) continue;
    const GuardCell c = cal.guard.unflat(i);
    nlohmann::ordered_json cell;
    cell["record"] = "cell";
    cell["index"] = {c.prefill_n, c.prefill_r, c.decode_r, c.bs, c.partition};
    cell["factor"] = raw[i];
    out << cell.dump() << '\n';
  }
  for (const auto& [sms, th] : cal.coeffs.prefill) {
    nlohmann::ordered_json t;
    t["record"] = "theta";
    t["phase"] = "prefill";
    t["sms"] = sms;
    t["theta"] = th.t;
    out << t.dump() << '\n';
  }
  for (const auto& [sms, th] : cal.coeffs.decode) {
    nlohmann::ordered_json t;
    t["record"] = "theta";
    t["phase"] = "decode";
    t["sms"] = sms;
    t["theta"] = th.t;
    out << t.dump() << '\n';
  }
}

Calibration read_calibration(std::istream& in) {
  std::string line;
  std::optional<ContentionGuard> guard;
  LatencyCoeffs coeffs;
  bool header_seen = false;
  std::size_t line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto j = nlohmann::json::parse(line);
      const std::string kind = j.at("record").get<std::string>();
      if (kind == "header") {
        if (j.at("format").get<std::string>() != kCalibrationFormat) throw SchemaError("not a calibration file");
        if (j.at("version").get<int>() != kCalibrationVersion) throw SchemaError("unsupported calibration version");
        header_seen = true;
      } else if (!header_seen) {
        throw SchemaError("calibration file must start with a header record");
      } else if (kind == "axes") {
        GuardAxes axes;
        axes.prefill_n = j.at("prefill_n").get<std::vector<Tokens>>();
        axes.prefill_r = j.at("prefill_r").get<std::vector<Tokens>>();
        axes.decode_r = j.at("decode_r").get<std::vector<Tokens>>();
        axes.batch_sizes = j.at("batch_sizes").get<std::vector<std::int64_t>>();
        axes.partitions = j.at("partitions").get<std::vector<int>>();
        const DecodeKey key = j.value("decode_key", std::string("max_reused")) == "total_reused"
                                  ? DecodeKey::TotalReused
                                  : DecodeKey::MaxReused;
        guard.emplace(std::move(axes), j.at("cap").get<double>(), j.at("cap_override").get<bool>(), key);
      } else if (kind == "cell") {
        if (!guard) throw SchemaError("cell record before axes");
        const auto idx = j.at("index").get<std::vector<std::size_t>>();
        if (idx.size() != 5) throw SchemaError("cell index needs 5 entries");
        guard->set(GuardCell{idx[0], idx[1], idx[2], idx[3], idx[4]}, j.at("factor").get<double>());
      } else if (kind == "theta") {
        const Phase phase = phase_from_string(j.at("phase").get<std::string>());
        const int sms = j.at("sms").get<int>();
        const auto th = j.at("theta").get<std::vector<double>>();
        if (phase == Phase::Prefill) {
          if (th.size() != 4) throw SchemaError("prefill theta needs 4 values");
          coeffs.prefill[sms] = PrefillTheta{{th[0], th[1], th[2], th[3]}};
        } else {
          if (th.size() != 3) throw SchemaError("decode theta needs 3 values");
          coeffs.decode[sms] = DecodeTheta{{th[0], th[1], th[2]}};
        }
      } else {
        throw SchemaError("unknown calibration record: " + kind);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("calibration line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!guard) throw SchemaError("calibration file without axes record");
  return Calibration{std::move(coeffs), std::move(*guard)};
}

void save_calibration(const std::string& path, const Calibration& cal) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write calibration file: " + path);
  write_calibration(out, cal);
}

Calibration load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open calibration file: " + path);
  return read_calibration(in);
}

void write_profile_samples(std::ostream& out, std::span<const ProfileSample> samples) {
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["phase"] = to_string(s.phase);
    j["sms"] = s.sms;
    if (s.phase == Phase::Prefill) {
      std::vector<Tokens> n;
      std::vector<Tokens> r;
      for (const auto& it : s.prefill) {
        n.push_back(it.n);
        r.push_back(it.r);
      }
      j["n"] = n;
      j["r"] = r;
    } else {
      j["r"] = s.decode_r;
    }
    j["latency_us"] = s.latency_us;
    if (s.peer) {
      j["peer"] = {{"prefill_n", s.peer->prefill_n},
                   {"prefill_r", s.peer->prefill_r},
                   {"decode_r", s.peer->decode_r},
                   {"bs", s.peer->bs}};
    }
    out << j.dump() << '\n';
  }
}

std::vector<ProfileSample> read_profile_samples(std::istream& in) {
  std::vector<ProfileSample> out;
  std::string line;
  std::size_t line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto j = nlohmann::json::parse(line);
      ProfileSample s;
      s.phase = phase_from_string(j.at("phase").get<std::string>());
      s.sms = j.at("sms").get<int>();
      if (s.phase == Phase::Prefill) {
        const auto n = j.at("n").get<std::vector<Tokens>>();
        const auto r = j.at("r").get<std::vector<Tokens>>();
        if (n.size() != r.size()) throw SchemaError("prefill sample n/r length mismatch");
        for (std::size_t i = 0; i < n.size(); ++i) s.prefill.push_back({n[i], r[i]});
      } else {
        s.decode_r = j.at("r").get<std::vector<Tokens>>();
      }
      s.latency_us = j.at("latency_us").get<double>();
      if (!(s.latency_us > 0)) throw SchemaError("profile sample latency must be positive");
      if (j.contains("peer")) {
        const auto& p = j["peer"];
        s.peer = CoRunPeer{p.at("prefill_n").get<Tokens>(), p.at("prefill_r").get<Tokens>(),
                           p.value("decode_r", Tokens{0}), p.value("bs", std::int64_t{0})};
      }
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("profile line " + std::to_string(line_no) + ": " + e.what());
  }
  return out;
}

Calibration calibrate(std::span<const ProfileSample> samples, const GuardAxes& axes, double cap,
                      bool cap_override) {
  Calibration cal{LatencyCoeffs{}, ContentionGuard(axes, cap, cap_override)};
  std::map<std::pair<Phase, int>, bool> groups;
  for (const auto& s : samples) {
    if (!s.peer) groups[{s.phase, s.sms}] = true;
  }
  for (const auto& [key, unused] : groups) {
    const FitResult r = fit(samples, key.first, key.second);
    if (key.first == Phase::Prefill) {
      cal.coeffs.prefill[key.second] = PrefillTheta{{r.theta[0], r.theta[1], r.theta[2], r.theta[3]}};
    } else {
      cal.coeffs.decode[key.second] = DecodeTheta{{r.theta[0], r.theta[1], r.theta[2]}};
    }
  }
  // Co-run decode samples become slowdown observations relative to the fitted
  // solo prediction of the same batch.
  for (const auto& s : samples) {
    if (!s.peer || s.phase != Phase::Decode) continue;
    const auto part_it = std::find(axes.partitions.begin(), axes.partitions.end(), s.sms);
    if (part_it == axes.partitions.end()) continue;
    const auto dec = cal.coeffs.decode.find(s.sms);
    if (dec == cal.coeffs.decode.end()) continue;
    double sum_r = 0;
    Tokens max_r = 0;
    for (Tokens r : s.decode_r) {
      sum_r += static_cast<double>(r);
      max_r = std::max(max_r, r);
    }
    const double solo = decode_us(sum_r, static_cast<std::int64_t>(s.decode_r.size()), dec->second);
    const Tokens key = cal.guard.decode_key() == DecodeKey::MaxReused ? max_r : static_cast<Tokens>(sum_r);
    const GuardCell c = cal.guard.cell(s.peer->prefill_n, s.peer->prefill_r, key,
                                       static_cast<std::int64_t>(s.decode_r.size()),
                                       static_cast<std::size_t>(part_it - axes.partitions.begin()));
    cal.guard.refine(c, s.latency_us / solo);
  }
  return cal;
}

}  // namespace muxsim
