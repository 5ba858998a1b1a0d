#pragma once

// Synthetic multi-track token corpus with known harmonic (chord Markov chain)
// and rhythmic (beat grid) latents. Stand-in for rendered multi-track audio
// tokenized by an RVQ codec.
//
// Level-1 encoding of a non-silent stem frame:
//   code = 1 + 2 * chord + accent        (chord in [0, C), accent in {0, 1})
// code 0 is the silence token (used at every level of a silent frame).
// Level-1 codes above 2C decode to "unknown". Higher levels carry residual
// codes in [1, V) drawn around a fixed timbre table indexed by
// (chord, beat phase, instrument, level).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/common.hpp"
#include "streamacc/tokengrid.hpp"

namespace streamacc {

inline constexpr int kNumInstruments = 18;

// General MIDI instrument categories. The last one plays the role of the
// vocal class: it may appear in the input mixture but is never a target.
inline constexpr std::array<const char*, kNumInstruments> kInstrumentNames = {
    "piano",  "chromatic_percussion", "organ",      "guitar",      "bass",    "strings",
    "ensemble", "brass",              "reed",       "pipe",        "synth_lead", "synth_pad",
    "synth_effects", "ethnic",        "percussive", "sound_effects", "drums", "speech"};
inline constexpr int kNeverTargetInstrument = kNumInstruments - 1;

inline constexpr Code kSilenceCode = 0;

struct SynthConfig {
  int num_chords = 12;
  double switch_prob = 0.02;
  int beat_period = 25;  // 0.5 s at 50 Hz
  int min_stems = 2;
  int max_stems = 6;
  int num_instruments = kNumInstruments;
  int song_frames = 1000;
  int window_frames = 500;  // 10 s training/eval windows
  std::uint32_t vocab_size = 64;
  int levels = 4;
  double mean_active_frames = 80.0;  // geometric span means of the silence model
  double mean_silent_frames = 30.0;
  double residual_noise = 0.25;  // chance a residual code leaves its timbre slot
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("SynthConfig: " + m); };
    if (num_chords < 2) fail("num_chords must be >= 2");
    if (!(switch_prob >= 0.0 && switch_prob < 1.0)) fail("switch_prob must be in [0, 1)");
    if (beat_period < 2) fail("beat_period must be >= 2");
    if (min_stems < 2 || max_stems < min_stems) fail("need 2 <= min_stems <= max_stems");
    if (num_instruments != kNumInstruments) fail("num_instruments must be 18");
    if (song_frames < 1) fail("song_frames must be >= 1");
    if (window_frames < 1 || window_frames > song_frames) fail("window_frames must be in [1, song_frames]");
    if (vocab_size < 2u * static_cast<std::uint32_t>(num_chords) + 1u)
      fail("vocab_size must be >= 2 * num_chords + 1 (silence + chord/accent codes)");
    if (vocab_size > 60000) fail("vocab_size too large for u16 codes");
    if (levels < 1) fail("levels must be >= 1");
    if (mean_active_frames < 1.0 || mean_silent_frames < 1.0) fail("silence span means must be >= 1");
    if (!(residual_noise >= 0.0 && residual_noise <= 1.0)) fail("residual_noise must be in [0, 1]");
  }
};

struct SynthSong {
  std::vector<TokenGrid> stems;
  std::vector<int> chord_track;
  std::vector<int> beat_phase;
  std::vector<int> instrument_ids;
  std::vector<std::vector<std::uint8_t>> silence;  // [stem][frame], 1 = silent

  std::size_t frames() const { return chord_track.size(); }
  std::size_t num_stems() const { return stems.size(); }
};

inline Code encode_level1(int chord, bool accent) { return static_cast<Code>(1 + 2 * chord + (accent ? 1 : 0)); }

enum class LatentState : std::uint8_t { silent, known, unknown };

struct FrameLatent {
  LatentState state = LatentState::unknown;
  int chord = -1;
  bool accent = false;
};

// Total inverse of the level-1 encoding. Works on any grid (including ones
// holding PAD or sentinel codes, which decode to unknown).
inline std::vector<FrameLatent> decode_latents(const TokenGrid& grid, int num_chords) {
  std::vector<FrameLatent> out(grid.frames());
  for (std::size_t t = 0; t < grid.frames(); ++t) {
    const Code c = grid.at(t, 0);
    if (c == kSilenceCode) {
      out[t].state = LatentState::silent;
    } else if (c <= 2 * num_chords) {
      out[t].state = LatentState::known;
      out[t].chord = (c - 1) / 2;
      out[t].accent = ((c - 1) % 2) == 1;
    }
  }
  return out;
}

inline bool frame_silent(const TokenGrid& grid, std::size_t t) { return grid.at(t, 0) == kSilenceCode; }

namespace detail {

inline Code residual_slot(std::uint64_t timbre_seed, int chord, int phase, int instrument, int level,
                          std::uint32_t vocab) {
  std::uint64_t h = timbre_seed;
  h = splitmix64(h ^ static_cast<std::uint64_t>(chord));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(phase) << 16));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(instrument) << 32));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(level) << 48));
  return static_cast<Code>(1 + h % (vocab - 1));
}

inline std::vector<std::uint8_t> silence_spans(const SynthConfig& cfg, Rng& rng, std::size_t frames) {
  std::vector<std::uint8_t> mask(frames, 0);
  const double p_active = cfg.mean_active_frames / (cfg.mean_active_frames + cfg.mean_silent_frames);
  bool active = uniform01(rng) < p_active;
  std::size_t t = 0;
  while (t < frames) {
    const double mean = active ? cfg.mean_active_frames : cfg.mean_silent_frames;
    const std::size_t len = 1 + static_cast<std::size_t>(std::geometric_distribution<int>(1.0 / mean)(rng));
    for (std::size_t i = t; i < std::min(frames, t + len); ++i) mask[i] = active ? 0 : 1;
    t += len;
    active = !active;
  }
  return mask;
}

}  // namespace detail

inline SynthSong generate_song(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SynthSong song;
  const std::size_t T = static_cast<std::size_t>(cfg.song_frames);
  const int n_stems = cfg.min_stems + static_cast<int>(uniform_index(rng, cfg.max_stems - cfg.min_stems + 1));

  song.instrument_ids.resize(n_stems);
  for (int s = 0; s < n_stems; ++s) song.instrument_ids[s] = static_cast<int>(uniform_index(rng, cfg.num_instruments));
  // At least one stem must be usable as a target.
  if (std::all_of(song.instrument_ids.begin(), song.instrument_ids.end(),
                  [](int i) { return i == kNeverTargetInstrument; }))
    song.instrument_ids[0] = static_cast<int>(uniform_index(rng, cfg.num_instruments - 1));

  song.chord_track.resize(T);
  song.beat_phase.resize(T);
  int chord = static_cast<int>(uniform_index(rng, cfg.num_chords));
  for (std::size_t t = 0; t < T; ++t) {
    if (t > 0 && uniform01(rng) < cfg.switch_prob) {
      const int other = static_cast<int>(uniform_index(rng, cfg.num_chords - 1));
      chord = other >= chord ? other + 1 : other;
    }
    song.chord_track[t] = chord;
    song.beat_phase[t] = static_cast<int>(t % static_cast<std::size_t>(cfg.beat_period));
  }

  const std::uint64_t timbre_seed = derive_seed(cfg.seed, 0x7157);
  const std::size_t nq = static_cast<std::size_t>(cfg.levels);
  for (int s = 0; s < n_stems; ++s) {
    auto mask = detail::silence_spans(cfg, rng, T);
    std::vector<Code> codes(T * nq, kSilenceCode);
    for (std::size_t t = 0; t < T; ++t) {
      if (mask[t]) continue;
      const int c = song.chord_track[t], phase = song.beat_phase[t];
      codes[t * nq] = encode_level1(c, phase == 0);
      for (std::size_t l = 1; l < nq; ++l) {
        Code slot = detail::residual_slot(timbre_seed, c, phase, song.instrument_ids[s], static_cast<int>(l), cfg.vocab_size);
        if (uniform01(rng) < cfg.residual_noise) slot = static_cast<Code>(1 + uniform_index(rng, cfg.vocab_size - 1));
        codes[t * nq + l] = slot;
      }
    }
    song.stems.emplace_back(T, nq, cfg.vocab_size, std::move(codes));
    song.silence.push_back(std::move(mask));
  }
  return song;
}

// Token-level mixture over frames [start, end). Commutative per-frame
// reduction: level 1 takes the max code over stems (non-silent stems share
// the same chord/accent code, silence is 0, so the mix decodes to the shared
// latent); higher levels take 1 + (sum of (code - 1) over non-silent stems)
// mod (V - 1). A frame where every stem is silent is silent.
inline TokenGrid mix_stems(const SynthSong& song, std::span<const int> stem_ids, std::size_t start, std::size_t end) {
  if (stem_ids.empty()) throw std::invalid_argument("mix_stems: no stems");
  const TokenGrid& first = song.stems.at(static_cast<std::size_t>(stem_ids[0]));
  const std::size_t nq = first.levels();
  const std::uint32_t V = first.vocab();
  std::vector<Code> codes((end - start) * nq, kSilenceCode);
  for (std::size_t t = start; t < end; ++t) {
    Code lead = kSilenceCode;
    std::vector<std::uint64_t> acc(nq, 0);
    for (int s : stem_ids) {
      const TokenGrid& g = song.stems.at(static_cast<std::size_t>(s));
      const Code c0 = g.at(t, 0);
      if (c0 == kSilenceCode) continue;
      lead = std::max(lead, c0);
      for (std::size_t l = 1; l < nq; ++l) acc[l] += g.at(t, l) - 1u;
    }
    if (lead == kSilenceCode) continue;
    Code* row = codes.data() + (t - start) * nq;
    row[0] = lead;
    for (std::size_t l = 1; l < nq; ++l) row[l] = static_cast<Code>(1 + acc[l] % (V - 1));
  }
  return TokenGrid(end - start, nq, V, std::move(codes));
}

struct ExamplePair {
  TokenGrid input_mix;   // window frames
  TokenGrid input_tail;  // up to `lookahead` frames following the window (may be shorter at song end)
  TokenGrid target;
  int target_instrument = 0;
  int target_stem = 0;
  std::vector<int> input_stems;
  std::size_t window_start = 0;
  int attempts = 0;
};

inline constexpr int kMaxWindowAttempts = 64;

// Frames in [start, start + window) where both the mixture and the target
// are non-silent.
inline std::size_t overlap_frames(const SynthSong& song, int target, std::span<const int> inputs,
                                  std::size_t start, std::size_t window) {
  std::size_t n = 0;
  for (std::size_t t = start; t < start + window; ++t) {
    if (song.silence[static_cast<std::size_t>(target)][t]) continue;
    for (int s : inputs)
      if (!song.silence[static_cast<std::size_t>(s)][t]) {
        ++n;
        break;
      }
  }
  return n;
}

inline bool window_passes(const SynthSong& song, int target, std::span<const int> inputs, std::size_t start,
                          std::size_t window) {
  return 2 * overlap_frames(song, target, inputs, start, window) >= window;
}

// Draws (target stem, N_in input stems, window start) and retries the whole
// draw until the >= 50% non-silent overlap filter passes.
inline ExamplePair make_example(const SynthSong& song, std::size_t window, std::uint64_t seed,
                                std::size_t lookahead = 0) {
  const std::size_t T = song.frames();
  if (window == 0 || window > T) throw std::invalid_argument("make_example: window must be in [1, T]");
  const int n = static_cast<int>(song.num_stems());
  std::vector<int> eligible;
  for (int s = 0; s < n; ++s)
    if (song.instrument_ids[static_cast<std::size_t>(s)] != kNeverTargetInstrument) eligible.push_back(s);
  if (eligible.empty() || n < 2) throw std::invalid_argument("make_example: song has no eligible target");

  Rng rng(seed);
  for (int attempt = 1; attempt <= kMaxWindowAttempts; ++attempt) {
    const int target = eligible[uniform_index(rng, eligible.size())];
    std::vector<int> others;
    for (int s = 0; s < n; ++s)
      if (s != target) others.push_back(s);
    const std::size_t n_in = 1 + uniform_index(rng, others.size());
    std::shuffle(others.begin(), others.end(), rng);
    others.resize(n_in);
    std::sort(others.begin(), others.end());
    const std::size_t start = uniform_index(rng, T - window + 1);
    if (!window_passes(song, target, others, start, window)) continue;

    ExamplePair ex;
    ex.target_stem = target;
    ex.target_instrument = song.instrument_ids[static_cast<std::size_t>(target)];
    ex.input_stems = others;
    ex.window_start = start;
    ex.attempts = attempt;
    ex.target = slice_frames(song.stems[static_cast<std::size_t>(target)], start, start + window);
    ex.input_mix = mix_stems(song, others, start, start + window);
    const std::size_t tail_end = std::min(T, start + window + lookahead);
    ex.input_tail = mix_stems(song, others, start + window, tail_end);
    return ex;
  }
  throw std::runtime_error("make_example: no window passed the non-silent overlap filter after " +
                           std::to_string(kMaxWindowAttempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Corpus: songs plus a song-level 90/5/5 train/valid/test split.
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::runtime_error("unknown split '" + s + "'");
}

struct Corpus {
  SynthConfig cfg;
  std::vector<SynthSong> songs;
  std::vector<Split> splits;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }
};

inline std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<Split> out(n, Split::train);
  if (n < 3) return out;
  const std::size_t n_valid = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.05 * static_cast<double>(n))));
  const std::size_t n_test = n_valid;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0x5b17));
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < n_valid; ++i) out[perm[i]] = Split::valid;
  for (std::size_t i = n_valid; i < n_valid + n_test; ++i) out[perm[i]] = Split::test;
  return out;
}

inline Corpus generate_corpus(const SynthConfig& cfg, std::size_t num_songs) {
  cfg.validate();
  Corpus c;
  c.cfg = cfg;
  c.songs.reserve(num_songs);
  for (std::size_t i = 0; i < num_songs; ++i) c.songs.push_back(generate_song(cfg, derive_seed(cfg.seed, 0x50, i)));
  c.splits = assign_splits(num_songs, cfg.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Corpus directory:
//   manifest.tsv                 song id, split, stem count, frames
//   synth.txt                    generator config (key = value)
//   songs/<id>/stem_<s>.tgrd     one grid file per stem
//   songs/<id>/meta.txt          instruments, chord_track, beat_phase, silence masks
// ---------------------------------------------------------------------------

inline std::string song_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "song_%05zu", i);
  return buf;
}

inline std::string synth_config_text(const SynthConfig& c) {
  std::ostringstream o;
  o << "num_chords = " << c.num_chords << "\n"
    << "switch_prob = " << fmt_double(c.switch_prob, 9) << "\n"
    << "beat_period = " << c.beat_period << "\n"
    << "min_stems = " << c.min_stems << "\n"
    << "max_stems = " << c.max_stems << "\n"
    << "num_instruments = " << c.num_instruments << "\n"
    << "song_frames = " << c.song_frames << "\n"
    << "window_frames = " << c.window_frames << "\n"
    << "vocab_size = " << c.vocab_size << "\n"
    << "levels = " << c.levels << "\n"
    << "mean_active_frames = " << fmt_double(c.mean_active_frames, 9) << "\n"
    << "mean_silent_frames = " << fmt_double(c.mean_silent_frames, 9) << "\n"
    << "residual_noise = " << fmt_double(c.residual_noise, 9) << "\n"
    << "seed = " << c.seed << "\n";
  return o.str();
}

inline SynthConfig parse_synth_config_text(const std::string& text) {
  SynthConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (k == "num_chords") c.num_chords = std::stoi(v);
    else if (k == "switch_prob") c.switch_prob = std::stod(v);
    else if (k == "beat_period") c.beat_period = std::stoi(v);
    else if (k == "min_stems") c.min_stems = std::stoi(v);
    else if (k == "max_stems") c.max_stems = std::stoi(v);
    else if (k == "num_instruments") c.num_instruments = std::stoi(v);
    else if (k == "song_frames") c.song_frames = std::stoi(v);
    else if (k == "window_frames") c.window_frames = std::stoi(v);
    else if (k == "vocab_size") c.vocab_size = static_cast<std::uint32_t>(std::stoul(v));
    else if (k == "levels") c.levels = std::stoi(v);
    else if (k == "mean_active_frames") c.mean_active_frames = std::stod(v);
    else if (k == "mean_silent_frames") c.mean_silent_frames = std::stod(v);
    else if (k == "residual_noise") c.residual_noise = std::stod(v);
    else if (k == "seed") c.seed = std::stoull(v);
    else throw std::runtime_error("synth.txt: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace detail {

template <class T>
void write_int_row(std::ostream& o, const char* key, const std::vector<T>& v) {
  o << key;
  for (auto x : v) o << ' ' << static_cast<long long>(x);
  o << '\n';
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << text;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace detail

inline std::string manifest_text(const Corpus& c) {
  std::ostringstream o;
  o << "# streamacc corpus manifest v1\n";
  o << "song\tsplit\tstems\tframes\n";
  for (std::size_t i = 0; i < c.songs.size(); ++i)
    o << song_id(i) << '\t' << split_name(c.splits[i]) << '\t' << c.songs[i].num_stems() << '\t'
      << c.songs[i].frames() << '\n';
  return o.str();
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& c) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "songs");
  detail::write_text_file(dir / "manifest.tsv", manifest_text(c));
  detail::write_text_file(dir / "synth.txt", synth_config_text(c.cfg));
  for (std::size_t i = 0; i < c.songs.size(); ++i) {
    const SynthSong& s = c.songs[i];
    const fs::path sd = dir / "songs" / song_id(i);
    fs::create_directories(sd);
    for (std::size_t k = 0; k < s.num_stems(); ++k)
      write_grid_file(sd / ("stem_" + std::to_string(k) + ".tgrd"), s.stems[k]);
    std::ostringstream m;
    m << "frames " << s.frames() << "\n";
    m << "stems " << s.num_stems() << "\n";
    detail::write_int_row(m, "instruments", s.instrument_ids);
    detail::write_int_row(m, "chord_track", s.chord_track);
    detail::write_int_row(m, "beat_phase", s.beat_phase);
    for (std::size_t k = 0; k < s.num_stems(); ++k) {
      m << "silence " << k << ' ';
      for (auto b : s.silence[k]) m << (b ? '1' : '0');
      m << '\n';
    }
    detail::write_text_file(sd / "meta.txt", m.str());
  }
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Corpus c;
  c.cfg = parse_synth_config_text(detail::read_text_file(dir / "synth.txt"));
  std::istringstream man(detail::read_text_file(dir / "manifest.tsv"));
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("song\t", 0) == 0) continue;
    std::istringstream row(line);
    std::string id, split;
    std::size_t stems = 0, frames = 0;
    row >> id >> split >> stems >> frames;
    if (!row) throw std::runtime_error("manifest.tsv: malformed line '" + line + "'");
    const fs::path sd = dir / "songs" / id;
    SynthSong s;
    for (std::size_t k = 0; k < stems; ++k) s.stems.push_back(read_grid_file(sd / ("stem_" + std::to_string(k) + ".tgrd")));
    std::istringstream meta(detail::read_text_file(sd / "meta.txt"));
    std::string key;
    s.silence.resize(stems);
    while (meta >> key) {
      if (key == "frames" || key == "stems") {
        std::size_t v;
        meta >> v;
      } else if (key == "instruments") {
        s.instrument_ids.resize(stems);
        for (auto& v : s.instrument_ids) meta >> v;
      } else if (key == "chord_track") {
        s.chord_track.resize(frames);
        for (auto& v : s.chord_track) meta >> v;
      } else if (key == "beat_phase") {
        s.beat_phase.resize(frames);
        for (auto& v : s.beat_phase) meta >> v;
      } else if (key == "silence") {
        std::size_t k;
        std::string bits;
        meta >> k >> bits;
        if (k >= stems || bits.size() != frames) throw std::runtime_error("meta.txt: bad silence row in " + id);
        s.silence[k].resize(frames);
        for (std::size_t t = 0; t < frames; ++t) s.silence[k][t] = bits[t] == '1';
      } else {
        throw std::runtime_error("meta.txt: unknown key '" + key + "' in " + id);
      }
    }
    c.songs.push_back(std::move(s));
    c.splits.push_back(parse_split(split));
  }
  return c;
}

}  // namespace streamacc
