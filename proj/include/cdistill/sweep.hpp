#pragma once

// Sweep result grid: per-run perplexities read back from metrics files,
// per-condition mean and standard deviation, CSV and JSON reports.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdistill/error.hpp"

namespace cdistill {

struct SweepCell {
  std::string condition;
  std::size_t student_layers = 0;
  std::uint64_t seed = 0;
  std::string status;  // "ok" or "failed"
  std::optional<double> perplexity;
  std::string run_dir;
  std::string error;
};

struct SweepSummary {
  std::string condition;
  std::size_t student_layers = 0;
  std::size_t runs = 0;
  std::size_t failed = 0;
  std::optional<double> mean;
  std::optional<double> sd;  // sample SD, present with two or more runs
};

/// Perplexity of the last metrics record that carries one.
inline std::optional<double> final_perplexity(const std::filesystem::path& metrics_file) {
  std::ifstream is(metrics_file);
  if (!is) return std::nullopt;
  std::optional<double> out;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed metrics line in " + metrics_file.string());
    if (j.contains("perplexity")) out = j.at("perplexity").get<double>();
  }
  return out;
}

inline std::vector<SweepSummary> summarize(const std::vector<SweepCell>& cells) {
  std::map<std::pair<std::string, std::size_t>, SweepSummary> groups;
  std::vector<std::pair<std::string, std::size_t>> order;
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> values;
  for (const auto& c : cells) {
    const auto key = std::make_pair(c.condition, c.student_layers);
    if (!groups.contains(key)) {
      order.push_back(key);
      groups[key].condition = c.condition;
      groups[key].student_layers = c.student_layers;
    }
    if (c.status == "ok" && c.perplexity) {
      values[key].push_back(*c.perplexity);
    } else {
      ++groups[key].failed;
    }
  }
  std::vector<SweepSummary> out;
  for (const auto& key : order) {
    SweepSummary s = groups[key];
    const auto& v = values[key];
    s.runs = v.size();
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      s.mean = sum / static_cast<double>(v.size());
      if (v.size() >= 2) {
        double ss = 0.0;
        for (double x : v) ss += (x - *s.mean) * (x - *s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
    }
    out.push_back(s);
  }
  return out;
}

namespace detail {

inline std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream ss;
  ss.precision(10);
  ss << *v;
  return ss.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace detail

inline void write_grid_csv(const std::vector<SweepCell>& cells, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "condition,student_layers,seed,status,perplexity,run_dir,error\n";
  for (const auto& c : cells) {
    os << c.condition << ',' << c.student_layers << ',' << c.seed << ',' << c.status << ','
       << detail::fmt_opt(c.perplexity) << ',' << detail::csv_field(c.run_dir) << ',' << detail::csv_field(c.error)
       << '\n';
  }
}

inline void write_summary_csv(const std::vector<SweepSummary>& rows, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "condition,student_layers,runs,failed,mean_perplexity,sd_perplexity\n";
  for (const auto& r : rows) {
    os << r.condition << ',' << r.student_layers << ',' << r.runs << ',' << r.failed << ',' << detail::fmt_opt(r.mean)
       << ',' << detail::fmt_opt(r.sd) << '\n';
  }
}

inline nlohmann::json sweep_report_json(const std::vector<SweepCell>& cells, const std::vector<SweepSummary>& rows) {
  nlohmann::json runs = nlohmann::json::array(), summary = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json j = {{"condition", c.condition}, {"student_layers", c.student_layers}, {"seed", c.seed},
                        {"status", c.status},       {"run_dir", c.run_dir}};
    if (c.perplexity) j["perplexity"] = *c.perplexity;
    if (!c.error.empty()) j["error"] = c.error;
    runs.push_back(j);
  }
  for (const auto& r : rows) {
    nlohmann::json j = {{"condition", r.condition}, {"student_layers", r.student_layers}, {"runs", r.runs}, {"failed", r.failed}};
    if (r.mean) j["mean_perplexity"] = *r.mean;
    if (r.sd) j["sd_perplexity"] = *r.sd;
    summary.push_back(j);
  }
  return {{"runs", runs}, {"summary", summary}};
}

}  // namespace cdistill
