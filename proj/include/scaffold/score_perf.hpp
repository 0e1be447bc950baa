#pragma once

// Reference scores, recorded MIDI performances, score/performance alignment
// and the two error features (duration-weighted pitch error, capped mean
// timing error) the practice policy is trained on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scaffold/errors.hpp"

namespace scaffold {

struct Note {
  int pitch = 60;
  double onset_beats = 0.0;
  double duration_beats = 1.0;

  bool operator==(const Note&) const = default;
};

struct Score {
  std::string piece_id;
  std::vector<Note> notes;  // sorted by onset_beats, never empty
};

struct PerformanceEvent {
  int pitch = 60;
  double onset_seconds = 0.0;

  bool operator==(const PerformanceEvent&) const = default;
};

struct PerformanceTrack {
  std::vector<PerformanceEvent> events;  // sorted by onset_seconds
  double bpm = 120.0;
};

struct AlignedNote {
  std::size_t score_index = 0;
  std::size_t perf_index = 0;
  bool pitch_correct = true;
  double offset_beats = 0.0;  // |played - nominal|, after anchoring
};

struct Alignment {
  std::vector<AlignedNote> pairs;  // monotone in both indices
  std::set<std::size_t> missed;    // score indices
  std::set<std::size_t> extra;     // performance indices
};

// ---------------------------------------------------------------------------
// Score documents
// ---------------------------------------------------------------------------

inline constexpr int kScoreSchemaVersion = 1;

/// Validates notes and returns them as a Score sorted by onset (then pitch).
inline Score make_score(std::string piece_id, std::vector<Note> notes) {
  if (notes.empty()) throw ValidationError("notes", "score must contain at least one note");
  for (std::size_t i = 0; i < notes.size(); ++i) {
    const auto& n = notes[i];
    const std::string field = "notes[" + std::to_string(i) + "]";
    if (n.pitch < 0 || n.pitch > 127)
      throw ValidationError(field + ".pitch", "must be in [0,127], got " + std::to_string(n.pitch));
    if (!std::isfinite(n.onset_beats) || n.onset_beats < 0.0)
      throw ValidationError(field + ".onset_beats", "must be finite and >= 0");
    if (!std::isfinite(n.duration_beats) || n.duration_beats <= 0.0)
      throw ValidationError(field + ".duration_beats", "must be finite and > 0");
  }
  std::stable_sort(notes.begin(), notes.end(), [](const Note& l, const Note& r) {
    return l.onset_beats != r.onset_beats ? l.onset_beats < r.onset_beats : l.pitch < r.pitch;
  });
  for (std::size_t i = 1; i < notes.size(); ++i) {
    if (notes[i].pitch == notes[i - 1].pitch && notes[i].onset_beats == notes[i - 1].onset_beats)
      throw ValidationError("notes", "duplicate note (pitch " + std::to_string(notes[i].pitch) +
                                         ", onset " + std::to_string(notes[i].onset_beats) + ")");
  }
  return Score{std::move(piece_id), std::move(notes)};
}

inline Score score_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("$", "score document must be an object");
  if (!doc.contains("schema") || !doc["schema"].is_number_integer())
    throw ValidationError("schema", "missing or not an integer");
  if (doc["schema"].get<int>() != kScoreSchemaVersion)
    throw ValidationError("schema", "unsupported version " + doc["schema"].dump());
  if (!doc.contains("piece_id") || !doc["piece_id"].is_string())
    throw ValidationError("piece_id", "missing or not a string");
  if (!doc.contains("notes") || !doc["notes"].is_array())
    throw ValidationError("notes", "missing or not an array");

  std::vector<Note> notes;
  const auto& arr = doc["notes"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& jn = arr[i];
    const std::string field = "notes[" + std::to_string(i) + "]";
    if (!jn.is_object()) throw ValidationError(field, "must be an object");
    for (const char* key : {"pitch", "onset_beats", "duration_beats"}) {
      if (!jn.contains(key) || !jn[key].is_number())
        throw ValidationError(field + "." + key, "missing or not a number");
    }
    if (!jn["pitch"].is_number_integer()) throw ValidationError(field + ".pitch", "must be an integer");
    notes.push_back(Note{jn["pitch"].get<int>(), jn["onset_beats"].get<double>(),
                         jn["duration_beats"].get<double>()});
  }
  return make_score(doc["piece_id"].get<std::string>(), std::move(notes));
}

inline Score parse_score(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("score document is not valid JSON: ") + e.what(), e.byte);
  }
  return score_from_json(doc);
}

inline nlohmann::json score_to_json(const Score& score) {
  nlohmann::json notes = nlohmann::json::array();
  for (const auto& n : score.notes)
    notes.push_back({{"pitch", n.pitch}, {"onset_beats", n.onset_beats}, {"duration_beats", n.duration_beats}});
  return {{"schema", kScoreSchemaVersion}, {"piece_id", score.piece_id}, {"notes", std::move(notes)}};
}

// ---------------------------------------------------------------------------
// Standard MIDI File reader / writer
// ---------------------------------------------------------------------------

namespace smf_detail {

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ >= bytes_.size(); }

  std::uint8_t u8() {
    need(1, "unexpected end of data");
    return bytes_[pos_++];
  }
  std::uint8_t peek() {
    need(1, "unexpected end of data");
    return bytes_[pos_];
  }
  std::uint32_t be(int n) {
    need(static_cast<std::size_t>(n), "unexpected end of data");
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::uint32_t varlen() {
    const std::size_t start = pos_;
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8();
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw ParseError("variable-length quantity longer than 4 bytes", start);
  }
  std::string tag() {
    need(4, "truncated chunk header");
    std::string t(reinterpret_cast<const char*>(bytes_.data() + pos_), 4);
    pos_ += 4;
    return t;
  }
  void skip(std::size_t n) {
    need(n, "chunk extends past end of data");
    pos_ += n;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw ParseError(what, pos_);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct RawNoteOn {
  std::uint64_t tick;
  std::size_t order;  // file order, keeps the sort stable across tracks
  int pitch;
};

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int n) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_varlen(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[4];
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

}  // namespace smf_detail

inline constexpr std::uint32_t kDefaultTempoMicros = 500000;  // 120 BPM

/// Reads a format 0/1 Standard MIDI File. Returns one event per note-on with
/// velocity > 0, timed through the file's tempo map. `bpm` is the initial
/// tempo of the file (120 when absent); callers that know the metronome tempo
/// of the trial overwrite it.
inline PerformanceTrack parse_smf(std::span<const std::uint8_t> bytes) {
  smf_detail::Reader rd(bytes);
  if (rd.remaining() < 14) throw ParseError("file too short for an MThd header", 0);
  if (rd.tag() != "MThd") throw ParseError("missing MThd header", 0);
  const std::uint32_t header_len = rd.be(4);
  if (header_len < 6) throw ParseError("MThd chunk shorter than 6 bytes", 4);
  const std::uint32_t format = rd.be(2);
  const std::uint32_t ntracks = rd.be(2);
  const std::uint32_t division = rd.be(2);
  rd.skip(header_len - 6);
  if (format > 1) throw ParseError("unsupported SMF format " + std::to_string(format), 8);
  if (division == 0) throw ParseError("division of zero ticks", 12);

  const bool smpte = (division & 0x8000u) != 0;
  double seconds_per_tick_smpte = 0.0;
  if (smpte) {
    const int fps = -static_cast<std::int8_t>(static_cast<std::uint8_t>(division >> 8));
    const int tpf = static_cast<int>(division & 0xFF);
    if (fps <= 0 || tpf <= 0) throw ParseError("invalid SMPTE division", 12);
    // 29 denotes 29.97 drop-frame.
    const double frames = fps == 29 ? 29.97 : static_cast<double>(fps);
    seconds_per_tick_smpte = 1.0 / (frames * tpf);
  }

  std::vector<smf_detail::RawNoteOn> notes;
  std::vector<std::pair<std::uint64_t, std::uint32_t>> tempo_changes;  // tick -> us/quarter
  std::size_t order = 0;
  std::uint32_t tracks_seen = 0;

  while (!rd.at_end() && tracks_seen < ntracks) {
    const std::size_t chunk_start = rd.pos();
    const std::string tag = rd.tag();
    const std::uint32_t len = rd.be(4);
    if (rd.remaining() < len) throw ParseError("chunk '" + tag + "' extends past end of data", chunk_start);
    if (tag != "MTrk") {
      rd.skip(len);
      continue;
    }
    ++tracks_seen;
    smf_detail::Reader tr(bytes.subspan(rd.pos(), len));
    const std::size_t base = rd.pos();
    rd.skip(len);

    std::uint64_t tick = 0;
    std::uint8_t running = 0;
    try {
      while (!tr.at_end()) {
        tick += tr.varlen();
        std::uint8_t status = tr.peek();
        if (status & 0x80) {
          tr.u8();
        } else {
          if (running == 0) throw ParseError("data byte without running status", tr.pos());
          status = running;
        }
        if (status == 0xFF) {
          const std::uint8_t type = tr.u8();
          const std::uint32_t mlen = tr.varlen();
          if (type == 0x51) {
            if (mlen != 3) throw ParseError("tempo meta event with length " + std::to_string(mlen), tr.pos());
            const std::uint32_t us = tr.be(3);
            if (us == 0) throw ParseError("tempo of zero microseconds per quarter", tr.pos());
            tempo_changes.emplace_back(tick, us);
          } else if (type == 0x2F) {
            tr.skip(mlen);
            break;
          } else {
            tr.skip(mlen);
          }
          running = 0;
        } else if (status == 0xF0 || status == 0xF7) {
          tr.skip(tr.varlen());
          running = 0;
        } else if (status >= 0xF0) {
          throw ParseError("unexpected system message in track", tr.pos());
        } else {
          running = status;
          const std::uint8_t kind = status & 0xF0;
          const std::uint8_t d1 = tr.u8();
          if (kind == 0xC0 || kind == 0xD0) continue;
          const std::uint8_t d2 = tr.u8();
          if ((d1 | d2) & 0x80) throw ParseError("data byte with high bit set", tr.pos());
          if (kind == 0x90 && d2 > 0) notes.push_back({tick, order++, static_cast<int>(d1)});
        }
      }
    } catch (const ParseError& e) {
      throw ParseError(std::string("malformed track event: ") + e.what(), base + e.offset());
    }
  }
  if (tracks_seen == 0) throw ParseError("no MTrk chunk", rd.pos());
  if (notes.empty()) throw EmptyPerformanceError();

  std::stable_sort(tempo_changes.begin(), tempo_changes.end(),
                   [](const auto& l, const auto& r) { return l.first < r.first; });
  std::stable_sort(notes.begin(), notes.end(), [](const auto& l, const auto& r) {
    return l.tick != r.tick ? l.tick < r.tick : l.order < r.order;
  });

  const double tpq = static_cast<double>(division);
  auto to_seconds = [&](std::uint64_t target) {
    if (smpte) return static_cast<double>(target) * seconds_per_tick_smpte;
    double seconds = 0.0;
    std::uint64_t last_tick = 0;
    std::uint32_t tempo = kDefaultTempoMicros;
    for (const auto& [t, us] : tempo_changes) {
      if (t >= target) break;
      seconds += static_cast<double>(t - last_tick) * tempo / (tpq * 1e6);
      last_tick = t;
      tempo = us;
    }
    return seconds + static_cast<double>(target - last_tick) * tempo / (tpq * 1e6);
  };

  PerformanceTrack track;
  std::uint32_t initial_tempo = kDefaultTempoMicros;
  if (!tempo_changes.empty() && tempo_changes.front().first == 0) initial_tempo = tempo_changes.front().second;
  track.bpm = 60e6 / initial_tempo;
  track.events.reserve(notes.size());
  for (const auto& n : notes) track.events.push_back({n.pitch, to_seconds(n.tick)});
  return track;
}

/// Writes a format 0 file at a constant tempo derived from `track.bpm`.
/// Every note lasts `note_ticks`; onsets are rounded to the tick grid.
inline std::vector<std::uint8_t> serialize_smf(const PerformanceTrack& track, std::uint16_t tpq = 480,
                                               std::uint32_t note_ticks = 240) {
  using smf_detail::put_be;
  using smf_detail::put_varlen;
  const auto tempo = static_cast<std::uint32_t>(std::lround(60e6 / track.bpm));

  struct Ev {
    std::uint64_t tick;
    int on;  // 0 = off, sorts before on at the same tick
    int pitch;
  };
  std::vector<Ev> evs;
  for (const auto& e : track.events) {
    const auto tick = static_cast<std::uint64_t>(std::llround(e.onset_seconds * tpq * 1e6 / tempo));
    evs.push_back({tick, 1, e.pitch});
    evs.push_back({tick + note_ticks, 0, e.pitch});
  }
  std::stable_sort(evs.begin(), evs.end(),
                   [](const Ev& l, const Ev& r) { return l.tick != r.tick ? l.tick < r.tick : l.on < r.on; });

  std::vector<std::uint8_t> body;
  put_varlen(body, 0);
  body.insert(body.end(), {0xFF, 0x51, 0x03});
  put_be(body, tempo, 3);
  std::uint64_t last = 0;
  for (const auto& e : evs) {
    put_varlen(body, static_cast<std::uint32_t>(e.tick - last));
    last = e.tick;
    body.push_back(e.on ? 0x90 : 0x80);
    body.push_back(static_cast<std::uint8_t>(e.pitch & 0x7F));
    body.push_back(e.on ? 64 : 0);
  }
  put_varlen(body, 0);
  body.insert(body.end(), {0xFF, 0x2F, 0x00});

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 0, 2);
  put_be(out, 1, 2);
  put_be(out, tpq, 2);
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(body.size()), 4);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

enum class AnchorMode {
  kFirstEvent,    // first played event sits on the first score note
  kMedianOffset,  // first-event anchor, then recentred on the median signed offset
};

struct AlignOptions {
  double window_beats = 0.5;
  AnchorMode anchor = AnchorMode::kFirstEvent;
};

namespace align_detail {

inline Alignment greedy_match(const Score& score, const std::vector<double>& beats,
                              const PerformanceTrack& perf, double window) {
  Alignment out;
  std::vector<bool> used(beats.size(), false);
  std::size_t next_free = 0;  // monotone: candidates come after the last match
  for (std::size_t si = 0; si < score.notes.size(); ++si) {
    const Note& note = score.notes[si];
    std::size_t best = beats.size();
    std::size_t nearest = beats.size();
    double nearest_dist = std::numeric_limits<double>::infinity();
    for (std::size_t pi = next_free; pi < beats.size(); ++pi) {
      if (used[pi]) continue;
      const double d = std::abs(beats[pi] - note.onset_beats);
      if (beats[pi] > note.onset_beats + window) break;
      if (d > window) continue;
      if (perf.events[pi].pitch == note.pitch) {
        best = pi;
        break;
      }
      if (d < nearest_dist) {
        nearest_dist = d;
        nearest = pi;
      }
    }
    if (best == beats.size()) best = nearest;
    if (best == beats.size()) {
      out.missed.insert(si);
      continue;
    }
    used[best] = true;
    next_free = best + 1;
    out.pairs.push_back({si, best, perf.events[best].pitch == note.pitch,
                         std::abs(beats[best] - note.onset_beats)});
  }
  for (std::size_t pi = 0; pi < beats.size(); ++pi)
    if (!used[pi]) out.extra.insert(pi);
  return out;
}

}  // namespace align_detail

/// Greedy monotone matching of performance events to score notes.
///
/// Performance onsets are converted to beats with `perf.bpm` and shifted so
/// the first event lands on the first score note. Each score note, in order,
/// takes the earliest later unmatched event of equal pitch inside the window,
/// otherwise the nearest-onset event inside the window, otherwise it is missed.
inline Alignment align(const Score& score, const PerformanceTrack& perf, const AlignOptions& opts = {}) {
  if (perf.events.empty()) {
    Alignment out;
    for (std::size_t i = 0; i < score.notes.size(); ++i) out.missed.insert(i);
    return out;
  }
  const double beats_per_second = perf.bpm / 60.0;
  const double shift = score.notes.front().onset_beats - perf.events.front().onset_seconds * beats_per_second;
  std::vector<double> beats(perf.events.size());
  for (std::size_t i = 0; i < beats.size(); ++i) beats[i] = perf.events[i].onset_seconds * beats_per_second + shift;

  Alignment first = align_detail::greedy_match(score, beats, perf, opts.window_beats);
  if (opts.anchor == AnchorMode::kFirstEvent || first.pairs.empty()) return first;

  std::vector<double> signed_offsets;
  for (const auto& p : first.pairs) signed_offsets.push_back(beats[p.perf_index] - score.notes[p.score_index].onset_beats);
  std::sort(signed_offsets.begin(), signed_offsets.end());
  const std::size_t m = signed_offsets.size();
  const double median = m % 2 ? signed_offsets[m / 2] : 0.5 * (signed_offsets[m / 2 - 1] + signed_offsets[m / 2]);
  for (auto& b : beats) b -= median;
  return align_detail::greedy_match(score, beats, perf, opts.window_beats);
}

// ---------------------------------------------------------------------------
// Error features
// ---------------------------------------------------------------------------

/// Duration-weighted fraction of score notes that were missed or played with
/// the wrong pitch. Extra events do not count.
inline double pitch_error(const Score& score, const Alignment& alignment) {
  std::vector<bool> wrong(score.notes.size(), true);
  for (const auto& p : alignment.pairs) wrong[p.score_index] = !p.pitch_correct;
  double weighted = 0.0, total = 0.0;
  for (std::size_t i = 0; i < score.notes.size(); ++i) {
    total += score.notes[i].duration_beats;
    if (wrong[i]) weighted += score.notes[i].duration_beats;
  }
  return total > 0.0 ? weighted / total : 0.0;
}

struct TimingError {
  double value = 1.0;
  bool no_matched_notes = true;
};

/// Mean of min(1, offset) over matched notes; 1.0 (flagged) when nothing matched.
inline TimingError timing_error(const Alignment& alignment) {
  if (alignment.pairs.empty()) return {1.0, true};
  double sum = 0.0;
  for (const auto& p : alignment.pairs) sum += std::min(1.0, p.offset_beats);
  return {sum / static_cast<double>(alignment.pairs.size()), false};
}

struct PerformanceErrors {
  double pitch = 0.0;
  double timing = 0.0;
  bool no_matched_notes = false;
};

inline PerformanceErrors evaluate_performance(const Score& score, const PerformanceTrack& perf,
                                              const AlignOptions& opts = {}) {
  const Alignment a = align(score, perf, opts);
  const TimingError t = timing_error(a);
  return {pitch_error(score, a), t.value, t.no_matched_notes};
}

}  // namespace scaffold
