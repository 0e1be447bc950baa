#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "scaffold/errors.hpp"
#include "scaffold/text.hpp"

namespace scaffold {

enum class PracticeMode : int { kPitch = 0, kTiming = 1 };

inline const char* to_string(PracticeMode pm) { return pm == PracticeMode::kPitch ? "PITCH" : "TIMING"; }

// One practice unit: errors on the full piece before and after practising in
// `pm` at `bpm`. `pm` is the teacher's choice.
struct PracticeTuple {
  std::string subject_id;
  std::string piece_id;
  double p_pre = 0.0;
  double t_pre = 0.0;
  PracticeMode pm = PracticeMode::kPitch;
  double bpm = 60.0;
  double p_post = 0.0;
  double t_post = 0.0;

  bool operator==(const PracticeTuple&) const = default;
};

enum class Provenance { kRecorded, kSynthetic };

struct Dataset {
  std::vector<PracticeTuple> tuples;
  Provenance provenance = Provenance::kRecorded;

  std::size_t size() const { return tuples.size(); }
  bool empty() const { return tuples.empty(); }
  std::size_t count(PracticeMode pm) const {
    return static_cast<std::size_t>(
        std::count_if(tuples.begin(), tuples.end(), [pm](const PracticeTuple& t) { return t.pm == pm; }));
  }
  bool has_both_modes() const { return count(PracticeMode::kPitch) > 0 && count(PracticeMode::kTiming) > 0; }
};

inline constexpr std::string_view kDatasetHeader = "subject_id,piece_id,p_pre,t_pre,pm,bpm,p_post,t_post";

/// Throws ValidationError naming the offending field. `where` prefixes the
/// field name (e.g. "row 12").
inline void validate(const PracticeTuple& t, const std::string& where = "tuple") {
  auto unit = [&](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError(where + "." + name, "must be in [0,1], got " + text::format_double(v));
  };
  unit(t.p_pre, "p_pre");
  unit(t.t_pre, "t_pre");
  unit(t.p_post, "p_post");
  unit(t.t_post, "t_post");
  if (!(t.bpm > 0.0 && t.bpm <= 400.0))
    throw ValidationError(where + ".bpm", "must be in (0,400], got " + text::format_double(t.bpm));
  if (t.pm != PracticeMode::kPitch && t.pm != PracticeMode::kTiming)
    throw ValidationError(where + ".pm", "must be 0 (pitch) or 1 (timing)");
  for (const auto* id : {&t.subject_id, &t.piece_id}) {
    if (id->find_first_of(",\"\n\r") != std::string::npos)
      throw ValidationError(where + (id == &t.subject_id ? ".subject_id" : ".piece_id"),
                            "must not contain commas, quotes or newlines");
  }
}

inline void validate(const Dataset& d) {
  for (std::size_t i = 0; i < d.tuples.size(); ++i) validate(d.tuples[i], "tuple " + std::to_string(i));
}

inline std::string csv_row(const PracticeTuple& t) {
  using text::format_double;
  std::string row = t.subject_id + ',' + t.piece_id + ',' + format_double(t.p_pre) + ',' + format_double(t.t_pre) +
                    ',' + std::to_string(static_cast<int>(t.pm)) + ',' + format_double(t.bpm) + ',' +
                    format_double(t.p_post) + ',' + format_double(t.t_post);
  return row;
}

inline std::string to_csv(const Dataset& d) {
  std::string out(kDatasetHeader);
  out += '\n';
  for (const auto& t : d.tuples) {
    out += csv_row(t);
    out += '\n';
  }
  return out;
}

/// Parses the canonical CSV. Errors carry the 1-based line number.
inline Dataset parse_csv(std::string_view content, Provenance provenance = Provenance::kRecorded) {
  Dataset d;
  d.provenance = provenance;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (!content.empty()) {
    auto nl = content.find('\n');
    std::string_view line = content.substr(0, nl);
    content = nl == std::string_view::npos ? std::string_view{} : content.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!header_seen) {
      if (line_no == 1 && line.size() >= 3 && line.substr(0, 3) == "\xEF\xBB\xBF") line.remove_prefix(3);
      if (line != kDatasetHeader) {
        // Name the first column that differs.
        auto got = text::split(line);
        auto want = text::split(kDatasetHeader);
        for (std::size_t i = 0; i < want.size(); ++i) {
          if (i >= got.size() || got[i] != want[i])
            throw ParseError("header: expected column '" + std::string(want[i]) + "' at position " +
                                 std::to_string(i + 1),
                             line_no);
        }
        throw ParseError("header: unexpected extra columns", line_no);
      }
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    auto cells = text::split(line);
    if (cells.size() != 8)
      throw ParseError("expected 8 columns, got " + std::to_string(cells.size()), line_no);
    const std::string row = "row " + std::to_string(line_no);
    auto num = [&](std::size_t i, const char* name) {
      auto v = text::parse_double(cells[i]);
      if (!v) throw ParseError(std::string("unparsable ") + name + " '" + std::string(cells[i]) + "'", line_no);
      return *v;
    };
    PracticeTuple t;
    t.subject_id = std::string(cells[0]);
    t.piece_id = std::string(cells[1]);
    t.p_pre = num(2, "p_pre");
    t.t_pre = num(3, "t_pre");
    auto pm = text::parse_int(cells[4]);
    if (!pm || (*pm != 0 && *pm != 1))
      throw ValidationError(row + ".pm", "must be 0 or 1, got '" + std::string(cells[4]) + "'");
    t.pm = static_cast<PracticeMode>(*pm);
    t.bpm = num(5, "bpm");
    t.p_post = num(6, "p_post");
    t.t_post = num(7, "t_post");
    validate(t, row);
    d.tuples.push_back(std::move(t));
  }
  if (!header_seen) throw ParseError("missing header row", 1);
  return d;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

inline Dataset load_csv(const std::filesystem::path& path, Provenance provenance = Provenance::kRecorded) {
  return parse_csv(read_file(path), provenance);
}

inline void save_csv(const Dataset& d, const std::filesystem::path& path) {
  validate(d);
  write_file(path, to_csv(d));
}

/// Import adapter for CSV files that carry the same information under other
/// column names (e.g. exports of recorded sessions). `column_map` maps each
/// canonical column to the source column name; unmapped canonical columns are
/// looked up verbatim. Subject/piece columns may be absent and default to
/// "unknown". `timing_label` is the cell text that denotes timing practice
/// when the pm column is not numeric.
inline Dataset import_csv(std::string_view content, const std::map<std::string, std::string>& column_map,
                          const std::string& timing_label = "timing") {
  std::vector<std::string> lines;
  {
    std::string_view rest = content;
    while (!rest.empty()) {
      auto nl = rest.find('\n');
      std::string l(rest.substr(0, nl));
      if (!l.empty() && l.back() == '\r') l.pop_back();
      lines.push_back(std::move(l));
      rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    }
  }
  if (lines.empty()) throw ParseError("empty file", 1);
  auto header = text::split(lines[0]);
  auto column = [&](const std::string& canonical, bool required) -> std::ptrdiff_t {
    auto it = column_map.find(canonical);
    const std::string name = it == column_map.end() ? canonical : it->second;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<std::ptrdiff_t>(i);
    if (required) throw ParseError("missing column '" + name + "' (for " + canonical + ")", 1);
    return -1;
  };
  const auto c_subject = column("subject_id", false);
  const auto c_piece = column("piece_id", false);
  const auto c_ppre = column("p_pre", true), c_tpre = column("t_pre", true);
  const auto c_pm = column("pm", true), c_bpm = column("bpm", true);
  const auto c_ppost = column("p_post", true), c_tpost = column("t_post", true);

  Dataset d;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    auto cells = text::split(lines[li]);
    auto cell = [&](std::ptrdiff_t c) -> std::string_view {
      if (c < 0) return "unknown";
      if (static_cast<std::size_t>(c) >= cells.size()) throw ParseError("row too short", li + 1);
      return cells[static_cast<std::size_t>(c)];
    };
    auto num = [&](std::ptrdiff_t c) {
      auto v = text::parse_double(cell(c));
      if (!v) throw ParseError("unparsable number '" + std::string(cell(c)) + "'", li + 1);
      return *v;
    };
    PracticeTuple t;
    t.subject_id = std::string(cell(c_subject));
    t.piece_id = std::string(cell(c_piece));
    t.p_pre = num(c_ppre);
    t.t_pre = num(c_tpre);
    t.p_post = num(c_ppost);
    t.t_post = num(c_tpost);
    t.bpm = num(c_bpm);
    const std::string_view pm = cell(c_pm);
    if (auto v = text::parse_double(pm)) {
      t.pm = *v > 0.5 ? PracticeMode::kTiming : PracticeMode::kPitch;
    } else {
      t.pm = pm == timing_label ? PracticeMode::kTiming : PracticeMode::kPitch;
    }
    validate(t, "row " + std::to_string(li + 1));
    d.tuples.push_back(std::move(t));
  }
  return d;
}

struct Split {
  Dataset train;
  Dataset test;
  bool stratified = true;  // false when a class was too small to stratify
};

/// Seeded shuffle split with |test| = round(test_fraction * N), stratified by
/// practice mode so that both modes land in both halves whenever each mode
/// has at least two tuples.
inline Split split(const Dataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DataError("test_fraction must lie in (0,1)");
  const std::size_t n = dataset.size();
  if (n < 5) throw DataError("split needs at least 5 tuples, got " + std::to_string(n));
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> by_mode[2];
  for (std::size_t i = 0; i < n; ++i) by_mode[static_cast<int>(dataset.tuples[i].pm)].push_back(i);
  for (auto& v : by_mode) std::shuffle(v.begin(), v.end(), rng);

  Split out;
  out.train.provenance = out.test.provenance = dataset.provenance;
  std::vector<bool> in_test(n, false);
  const bool can_stratify = by_mode[0].size() >= 2 && by_mode[1].size() >= 2 && n_test >= 2 && n - n_test >= 2;
  if (can_stratify) {
    // Proportional share for the pitch mode, clamped so each mode keeps at
    // least one tuple on each side.
    const std::size_t n0 = by_mode[0].size(), n1 = by_mode[1].size();
    const auto share0 = static_cast<std::size_t>(
        std::lround(static_cast<double>(n_test) * static_cast<double>(n0) / static_cast<double>(n)));
    const std::size_t lo = std::max<std::size_t>(1, n_test + 1 > n1 ? n_test + 1 - n1 : 0);
    const std::size_t hi = std::min(n0 - 1, n_test - 1);
    const std::size_t k0 = std::clamp(share0, lo, hi);
    const std::size_t k1 = n_test - k0;
    for (std::size_t i = 0; i < k0; ++i) in_test[by_mode[0][i]] = true;
    for (std::size_t i = 0; i < k1; ++i) in_test[by_mode[1][i]] = true;
  } else {
    out.stratified = false;
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t i = 0; i < n_test; ++i) in_test[all[i]] = true;
  }
  for (std::size_t i = 0; i < n; ++i) (in_test[i] ? out.test : out.train).tuples.push_back(dataset.tuples[i]);
  return out;
}

}  // namespace scaffold
