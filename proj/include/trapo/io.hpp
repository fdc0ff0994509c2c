#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trapo/core.hpp"
#include "trapo/diagnostics.hpp"
#include "trapo/harness.hpp"
#include "trapo/trajectory.hpp"

namespace trapo {

/// Malformed input file; `line()` is 1-based, 0 when not line-specific.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string json_number(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string json_opt(const std::optional<double>& v) { return v ? json_number(*v) : "null"; }

inline std::string json_bool(bool b) { return b ? "true" : "false"; }

}  // namespace detail

struct RunConfig {
  TrainerConfig trainer;
  WorldConfig world;
};

/// Flat `key = value` lines; `#` starts a comment. Unknown keys and bad
/// values raise ConfigError with the line number in the message.
inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_setting(cfg.trainer, cfg.world, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(e.field(), std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path + "'");
  return parse_config(in);
}

// ---------------------------------------------------------------------------
// JSONL writers. Keys are emitted in a fixed order; floats use %.9g.

inline std::string to_json(const PassRateRecord& r) {
  std::string s = "{\"epoch\":" + std::to_string(r.epoch) + ",\"qid\":" + std::to_string(r.qid) +
                  ",\"split\":\"" + (r.split == Split::labeled ? "labeled" : "unlabeled") +
                  "\",\"pass_rate\":" + detail::json_number(r.pass_rate) + ",\"pseudo_label\":" +
                  (r.pseudo_label ? std::to_string(*r.pseudo_label) : "null") +
                  ",\"confidence\":" + detail::json_opt(r.confidence) + ",\"tie\":" + detail::json_bool(r.tie) +
                  ",\"selected\":" + detail::json_bool(r.selected) + ",\"tcs\":" + detail::json_opt(r.tcs) + "}";
  return s;
}

inline std::string to_json(const EpochMetrics& m) {
  using detail::json_opt;
  return "{\"epoch\":" + std::to_string(m.epoch) + ",\"labeled_train_acc\":" + json_opt(m.labeled_train_acc) +
         ",\"eval_acc_id\":" + json_opt(m.eval_acc_id) + ",\"eval_acc_ood\":" + json_opt(m.eval_acc_ood) +
         ",\"n_selected\":" + std::to_string(m.n_selected) +
         ",\"mean_tcs_selected\":" + json_opt(m.mean_tcs_selected) +
         ",\"mean_tcs_unselected\":" + json_opt(m.mean_tcs_unselected) +
         ",\"pseudo_acc_selected\":" + json_opt(m.pseudo_acc_selected) +
         ",\"pseudo_acc_unselected\":" + json_opt(m.pseudo_acc_unselected) +
         ",\"mean_confidence\":" + json_opt(m.mean_confidence) + ",\"mean_divergence\":" +
         json_opt(m.mean_divergence) + ",\"rtc\":" + json_opt(m.rtc) + ",\"loss\":" + detail::json_number(m.loss) +
         "}";
}

inline std::string to_json(const BoundReport& b) {
  using detail::json_number;
  return "{\"epoch\":" + std::to_string(b.epoch) + ",\"empirical_risk_labeled\":" +
         json_number(b.empirical_risk_labeled) + ",\"mean_divergence\":" + json_number(b.mean_divergence) +
         ",\"mean_confidence\":" + json_number(b.mean_confidence) + ",\"hoeffding_term\":" +
         json_number(b.hoeffding_term) + ",\"rtc\":" + json_number(b.rtc) + ",\"n\":" + std::to_string(b.n) +
         ",\"G\":" + std::to_string(b.G) + "}";
}

inline std::string to_json(const SelectionMask& m) {
  std::string s = "{\"epoch\":" + std::to_string(m.epoch) + ",\"selected\":[";
  bool first = true;
  for (QuestionId id : m.selected) {
    if (!first) s += ',';
    s += std::to_string(id);
    first = false;
  }
  return s + "]}";
}

template <class Range>
void write_jsonl(std::ostream& out, const Range& rows) {
  for (const auto& r : rows) out << to_json(r) << '\n';
}

/// `qid,split,epoch,pass_rate`, one row per (question, epoch), 6 decimals.
inline void write_trajectory_csv(std::ostream& out, const std::vector<PassRateRecord>& records) {
  out << "qid,split,epoch,pass_rate\n";
  char buf[96];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%u,%s,%u,%.6f\n", r.qid, r.split == Split::labeled ? "labeled" : "unlabeled",
                  r.epoch, r.pass_rate);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// passrates.jsonl reader.

namespace detail {

/// Logged pass rates are count/G written with 9 significant digits. Snap
/// them back to the nearest small-denominator fraction so that replayed
/// trajectories match the online doubles exactly.
inline double snap_fraction(double v) {
  for (int den = 1; den <= 1024; ++den) {
    const double num = std::round(v * den);
    const double candidate = num / den;
    if (std::abs(candidate - v) <= 5e-9 * std::max(1.0, std::abs(v))) return candidate;
  }
  return v;
}

}  // namespace detail

inline PassRateRecord parse_passrate_line(const std::string& line, std::size_t lineno) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
  }
  if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
  auto require = [&](const char* key) -> const json& {
    const auto it = j.find(key);
    if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", lineno);
    return *it;
  };
  try {
    PassRateRecord r;
    const json& epoch = require("epoch");
    const json& qid = require("qid");
    if (!epoch.is_number_unsigned() || !qid.is_number_unsigned())
      throw ParseError("epoch and qid must be non-negative integers", lineno);
    r.epoch = epoch.get<std::uint32_t>();
    r.qid = qid.get<QuestionId>();
    const std::string split = require("split").get<std::string>();
    if (split == "labeled") r.split = Split::labeled;
    else if (split == "unlabeled") r.split = Split::unlabeled;
    else throw ParseError("split must be 'labeled' or 'unlabeled'", lineno);
    const json& p = require("pass_rate");
    if (!p.is_number()) throw ParseError("pass_rate must be a number", lineno);
    r.pass_rate = detail::snap_fraction(p.get<double>());
    if (!(r.pass_rate >= 0.0 && r.pass_rate <= 1.0)) throw ParseError("pass_rate outside [0, 1]", lineno);
    if (const json& v = require("pseudo_label"); !v.is_null()) r.pseudo_label = v.get<Token>();
    if (const json& v = require("confidence"); !v.is_null()) r.confidence = detail::snap_fraction(v.get<double>());
    r.tie = require("tie").get<bool>();
    r.selected = require("selected").get<bool>();
    if (const json& v = require("tcs"); !v.is_null()) r.tcs = v.get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field type: ") + e.what(), lineno);
  }
}

inline std::vector<PassRateRecord> read_passrates(std::istream& in) {
  std::vector<PassRateRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    out.push_back(parse_passrate_line(line, lineno));
  }
  if (out.empty()) throw ParseError("empty pass-rate log", 0);
  return out;
}

inline std::vector<PassRateRecord> read_passrates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  return read_passrates(in);
}

}  // namespace trapo
