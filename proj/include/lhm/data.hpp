#pragma once

// Patient trajectories and their JSON-lines file form:
//   {id, time_unit, times: [...], y: [[...]], mask: [[...]],
//    treatments: [{time, dose}], static: [...]}

#include "lhm/odesolve.hpp"
#include "lhm/pharmaco.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lhm {

using ad::Mat;
using ad::Vec;
using json = nlohmann::ordered_json;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrajectoryRecord {
  std::string id;
  std::string time_unit = "days";
  std::vector<double> times;  // sorted measurement times
  Mat y;                      // |times| x D, zero where unobserved
  Mat mask;                   // |times| x D, 1 observed / 0 missing
  std::vector<pharmaco::Bolus> treatments;
  std::vector<double> static_covariates;

  [[nodiscard]] Eigen::Index dims() const { return y.cols(); }
  [[nodiscard]] std::size_t size() const { return times.size(); }
  [[nodiscard]] double observed_count() const { return mask.sum(); }

  void validate() const {
    if (y.rows() != static_cast<Eigen::Index>(times.size()) || mask.rows() != y.rows() || mask.cols() != y.cols())
      throw DataError("record '" + id + "': times/y/mask shapes disagree");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (times[i] <= times[i - 1]) throw DataError("record '" + id + "': times must be strictly increasing");
    for (std::size_t i = 1; i < treatments.size(); ++i)
      if (treatments[i].time < treatments[i - 1].time) throw DataError("record '" + id + "': treatments unsorted");
  }
};

// Measurements with time <= t0 (the observed history).
inline TrajectoryRecord history_until(const TrajectoryRecord& r, double t0) {
  TrajectoryRecord h = r;
  const auto n = static_cast<Eigen::Index>(std::upper_bound(r.times.begin(), r.times.end(), t0) - r.times.begin());
  h.times.resize(static_cast<std::size_t>(n));
  h.y = r.y.topRows(n);
  h.mask = r.mask.topRows(n);
  return h;
}

// Measurements with time > t0 (the forecast targets).
inline TrajectoryRecord future_after(const TrajectoryRecord& r, double t0) {
  TrajectoryRecord f = r;
  const auto n = static_cast<Eigen::Index>(std::upper_bound(r.times.begin(), r.times.end(), t0) - r.times.begin());
  const auto m = static_cast<Eigen::Index>(r.times.size()) - n;
  f.times.assign(r.times.begin() + n, r.times.end());
  f.y = r.y.bottomRows(m);
  f.mask = r.mask.bottomRows(m);
  return f;
}

// Control signal seen by the models: a piecewise-constant cumulative-dose
// channel followed by static covariates held constant over [0, T]. Dose
// times are the breakpoints; `active[k]` is the number of boluses in force in
// control regime k.
struct TreatmentControl {
  ode::ControlSignal signal;
  std::vector<pharmaco::Bolus> boluses;
  std::vector<std::size_t> active;

  [[nodiscard]] Eigen::Index channels() const { return signal.channels(); }
};

inline TreatmentControl make_control(const std::vector<pharmaco::Bolus>& treatments,
                                     const std::vector<double>& statics) {
  TreatmentControl c;
  c.boluses = treatments;
  std::stable_sort(c.boluses.begin(), c.boluses.end(),
                   [](const auto& a, const auto& b) { return a.time < b.time; });
  for (const auto& b : c.boluses)
    if (c.signal.breakpoints.empty() || b.time > c.signal.breakpoints.back()) c.signal.breakpoints.push_back(b.time);
  const auto a = static_cast<Eigen::Index>(1 + statics.size());
  double cumulative = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k <= c.signal.breakpoints.size(); ++k) {
    if (k > 0) {
      const double bp = c.signal.breakpoints[k - 1];
      while (used < c.boluses.size() && c.boluses[used].time <= bp) cumulative += c.boluses[used++].dose;
    }
    Vec v(a);
    v(0) = cumulative;
    for (std::size_t s = 0; s < statics.size(); ++s) v(static_cast<Eigen::Index>(s + 1)) = statics[s];
    c.signal.segment_values.push_back(v);
    c.active.push_back(used);
  }
  return c;
}

inline TreatmentControl make_control(const TrajectoryRecord& r) {
  return make_control(r.treatments, r.static_covariates);
}

// ---- JSON -----------------------------------------------------------------

inline json record_to_json(const TrajectoryRecord& r) {
  json j;
  j["id"] = r.id;
  j["time_unit"] = r.time_unit;
  j["times"] = r.times;
  json y = json::array(), m = json::array();
  for (Eigen::Index i = 0; i < r.y.rows(); ++i) {
    std::vector<double> yr(static_cast<std::size_t>(r.y.cols()));
    std::vector<int> mr(static_cast<std::size_t>(r.y.cols()));
    for (Eigen::Index d = 0; d < r.y.cols(); ++d) {
      yr[static_cast<std::size_t>(d)] = r.mask(i, d) > 0.5 ? r.y(i, d) : 0.0;
      mr[static_cast<std::size_t>(d)] = r.mask(i, d) > 0.5 ? 1 : 0;
    }
    y.push_back(yr);
    m.push_back(mr);
  }
  j["y"] = y;
  j["mask"] = m;
  json tr = json::array();
  for (const auto& b : r.treatments) tr.push_back({{"time", b.time}, {"dose", b.dose}});
  j["treatments"] = tr;
  j["static"] = r.static_covariates;
  return j;
}

inline TrajectoryRecord record_from_json(const json& j) {
  TrajectoryRecord r;
  try {
    r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    r.time_unit = j.value("time_unit", std::string("days"));
    r.times = j.at("times").get<std::vector<double>>();
    const auto& y = j.at("y");
    const auto& m = j.at("mask");
    const auto n = static_cast<Eigen::Index>(r.times.size());
    if (static_cast<Eigen::Index>(y.size()) != n || static_cast<Eigen::Index>(m.size()) != n)
      throw DataError("record '" + r.id + "': y/mask row count differs from times");
    const auto d = n > 0 ? static_cast<Eigen::Index>(y.at(0).size()) : Eigen::Index(0);
    r.y = Mat::Zero(n, d);
    r.mask = Mat::Zero(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& yr = y.at(static_cast<std::size_t>(i));
      const auto& mr = m.at(static_cast<std::size_t>(i));
      if (static_cast<Eigen::Index>(yr.size()) != d || static_cast<Eigen::Index>(mr.size()) != d)
        throw DataError("record '" + r.id + "': ragged y/mask rows");
      for (Eigen::Index k = 0; k < d; ++k) {
        const auto& cell = yr.at(static_cast<std::size_t>(k));
        const double mk = mr.at(static_cast<std::size_t>(k)).get<double>();
        const bool observed = mk > 0.5 && !cell.is_null();
        r.mask(i, k) = observed ? 1.0 : 0.0;
        r.y(i, k) = observed ? cell.get<double>() : 0.0;
      }
    }
    if (j.contains("treatments"))
      for (const auto& t : j.at("treatments")) r.treatments.push_back({t.at("time").get<double>(), t.at("dose").get<double>()});
    if (j.contains("static")) r.static_covariates = j.at("static").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed record: ") + e.what());
  }
  r.validate();
  return r;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  for (const auto& r : rows) out << r.dump() << '\n';
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_records(const std::filesystem::path& path, const std::vector<TrajectoryRecord>& recs) {
  std::vector<json> rows;
  rows.reserve(recs.size());
  for (const auto& r : recs) rows.push_back(record_to_json(r));
  write_jsonl(path, rows);
}

inline std::vector<TrajectoryRecord> read_records(const std::filesystem::path& path) {
  std::vector<TrajectoryRecord> recs;
  for (const auto& j : read_jsonl(path)) recs.push_back(record_from_json(j));
  return recs;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace lhm
