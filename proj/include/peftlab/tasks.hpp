#pragma once

// Synthetic multimodal task suite. Scenes are symbol grids holding colored
// shapes; four task families (refer, caption, entail, qa) plus a copy task
// used for backbone pretraining. Every sample is a pure function of
// (kind, seed, index, grid side), and labels are correct by construction.

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

enum class TaskKind { refer, caption, entail, qa, copy };

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::refer: return "refer";
    case TaskKind::caption: return "caption";
    case TaskKind::entail: return "entail";
    case TaskKind::qa: return "qa";
    case TaskKind::copy: return "copy";
  }
  return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
  for (TaskKind k : {TaskKind::refer, TaskKind::caption, TaskKind::entail, TaskKind::qa,
                     TaskKind::copy}) {
    if (s == task_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown task kind: " + s);
}

// ---------------------------------------------------------------------------
// Vocabulary. Closed and synthetic: specials, task words, count words,
// coordinate tokens (one per grid line in [0, g]) and filler words that give
// the copy task something to copy.
// ---------------------------------------------------------------------------

class TaskVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;

  static const std::array<const char*, 4>& colors() {
    static const std::array<const char*, 4> c = {"red", "green", "blue", "yellow"};
    return c;
  }
  static const std::array<const char*, 3>& shapes() {
    static const std::array<const char*, 3> s = {"circle", "square", "triangle"};
    return s;
  }
  static const std::array<const char*, 7>& counts() {
    static const std::array<const char*, 7> c = {"zero", "one",  "two", "three",
                                                 "four", "five", "six"};
    return c;
  }

  explicit TaskVocab(int grid_side, int filler_words = 150) : grid_side_(grid_side) {
    add("<pad>");
    add("<bos>");
    add("<eos>");
    add("<sep>");
    for (auto* c : colors()) add(c);
    for (auto* s : shapes()) add(s);
    for (auto* w : {"find", "a", "and", "at", "there", "is", "the", "what", "color", "how",
                    "many", "objects"}) {
      add(w);
    }
    for (auto* w : {"entails", "contradicts", "neutral"}) add(w);
    for (auto* c : counts()) add(c);
    coord_base_ = int(words_.size());
    for (int i = 0; i <= grid_side; ++i) add("c" + std::to_string(i));
    filler_base_ = int(words_.size());
    for (int i = 0; i < filler_words; ++i) {
      std::ostringstream os;
      os << "w" << (i < 10 ? "00" : i < 100 ? "0" : "") << i;
      add(os.str());
    }
  }

  int size() const { return int(words_.size()); }
  int grid_side() const { return grid_side_; }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::out_of_range("vocab: unknown word '" + w + "'");
    return it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: id " + std::to_string(id));
    return words_[size_t(id)];
  }

  int coord(int v) const {
    if (v < 0 || v > grid_side_) {
      throw std::out_of_range("vocab: coordinate " + std::to_string(v) + " outside [0, " +
                              std::to_string(grid_side_) + "]");
    }
    return coord_base_ + v;
  }
  bool is_coord(int id) const { return id >= coord_base_ && id <= coord_base_ + grid_side_; }
  int coord_value(int id) const { return id - coord_base_; }

  int color_id(int c) const { return id(colors()[size_t(c)]); }
  int shape_id(int s) const { return id(shapes()[size_t(s)]); }
  int count_id(int n) const { return id(counts().at(size_t(n))); }
  int filler(int i) const { return filler_base_ + i; }
  int num_filler() const { return size() - filler_base_; }

  std::vector<int> encode(const std::vector<std::string>& ws) const {
    std::vector<int> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
  }
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    index_[w] = int(words_.size());
    words_.push_back(w);
  }

  int grid_side_;
  int coord_base_ = 0;
  int filler_base_ = 0;
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Boxes and scenes
// ---------------------------------------------------------------------------

// Axis-aligned box in grid units, half-open on the right/bottom edge.
struct Box {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return x1 <= x2 && y1 <= y2; }
  int64_t area() const { return int64_t(x2 - x1) * int64_t(y2 - y1); }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: invalid box");
  const int ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const int ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  const int64_t inter =
      int64_t(std::max(0, ix2 - ix1)) * int64_t(std::max(0, iy2 - iy1));
  const int64_t uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

// Grid symbol ids: 0 empty, otherwise 1 + shape * num_colors + color.
constexpr int kEmptySymbol = 0;
constexpr int kNumColors = 4;
constexpr int kNumShapes = 3;
constexpr int kImageVocab = 1 + kNumShapes * kNumColors;

inline int object_symbol(int shape, int color) { return 1 + shape * kNumColors + color; }

struct SceneObject {
  int shape = 0;
  int color = 0;
  Box box;
};

struct Scene {
  int g = 0;
  std::vector<int> grid;  // g*g symbols, row-major
  std::vector<SceneObject> objects;

  int symbol(int x, int y) const { return grid[size_t(y * g + x)]; }
};

struct TaskSample {
  TaskKind kind = TaskKind::refer;
  int g = 0;
  std::vector<int> grid;                    // g*g symbols
  std::vector<int> text;                    // query / hypothesis / question tokens
  std::vector<int> target;                  // target token sequence
  std::vector<std::vector<int>> candidates; // qa only
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail_tasks {

inline bool overlaps(const Box& a, const Box& b) {
  return a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2;
}

// Places `k` non-overlapping rectangles with distinct (shape, color) pairs.
inline Scene make_scene(Rng& rng, int g, int k) {
  if (k > kNumShapes * kNumColors) throw std::runtime_error("make_scene: too many objects");
  Scene scene;
  scene.g = g;
  scene.grid.assign(size_t(g) * size_t(g), kEmptySymbol);
  std::vector<int> combos(size_t(kNumShapes * kNumColors));
  for (size_t i = 0; i < combos.size(); ++i) combos[i] = int(i);
  rng.shuffle(combos);
  const int max_side = std::max(1, std::min(3, g / 2));
  for (int obj = 0; obj < k; ++obj) {
    const int shape = combos[size_t(obj)] / kNumColors;
    const int color = combos[size_t(obj)] % kNumColors;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int w = 1 + int(rng.below(max_side));
      const int h = 1 + int(rng.below(max_side));
      if (w > g || h > g) continue;
      const int x = int(rng.below(g - w + 1));
      const int y = int(rng.below(g - h + 1));
      Box b{x, y, x + w, y + h};
      bool clash = false;
      for (const auto& o : scene.objects) clash = clash || overlaps(b, o.box);
      if (clash) continue;
      for (int yy = b.y1; yy < b.y2; ++yy)
        for (int xx = b.x1; xx < b.x2; ++xx)
          scene.grid[size_t(yy * g + xx)] = object_symbol(shape, color);
      scene.objects.push_back({shape, color, b});
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("dataset generation: grid side " + std::to_string(g) +
                               " too small to place " + std::to_string(k) + " objects");
    }
  }
  // Scan order, top-left first. Keeps captions deterministic.
  std::sort(scene.objects.begin(), scene.objects.end(), [](const auto& a, const auto& b) {
    return std::tie(a.box.y1, a.box.x1) < std::tie(b.box.y1, b.box.x1);
  });
  return scene;
}

inline void append_box(std::vector<int>& out, const TaskVocab& vocab, const Box& b) {
  out.push_back(vocab.coord(b.x1));
  out.push_back(vocab.coord(b.y1));
  out.push_back(vocab.coord(b.x2));
  out.push_back(vocab.coord(b.y2));
}

inline std::vector<int> describe(const TaskVocab& vocab, const SceneObject& o) {
  std::vector<int> out = {vocab.id("a"), vocab.color_id(o.color), vocab.shape_id(o.shape),
                          vocab.id("at")};
  append_box(out, vocab, o.box);
  return out;
}

}  // namespace detail_tasks

inline TaskSample generate_sample(TaskKind kind, const TaskVocab& vocab, Rng sample_rng,
                                  int g) {
  using namespace detail_tasks;
  Rng& rng = sample_rng;
  TaskSample s;
  s.kind = kind;
  s.g = g;
  switch (kind) {
    case TaskKind::refer: {
      const int k = 2 + int(rng.below(3));
      Scene scene = make_scene(rng, g, k);
      const auto& obj = scene.objects[size_t(rng.below(int64_t(scene.objects.size())))];
      s.grid = scene.grid;
      s.text = {vocab.id("find"), vocab.color_id(obj.color), vocab.shape_id(obj.shape)};
      append_box(s.target, vocab, obj.box);
      break;
    }
    case TaskKind::caption: {
      const int k = 1 + int(rng.below(2));
      Scene scene = make_scene(rng, g, k);
      s.grid = scene.grid;
      for (size_t i = 0; i < scene.objects.size(); ++i) {
        if (i) s.target.push_back(vocab.id("and"));
        auto d = describe(vocab, scene.objects[i]);
        s.target.insert(s.target.end(), d.begin(), d.end());
      }
      break;
    }
    case TaskKind::entail: {
      // Hypothesis about a shape that occurs exactly once (entail/contradict)
      // or not at all (neutral).
      const int k = 1 + int(rng.below(3));
      Scene scene = make_scene(rng, g, k);
      s.grid = scene.grid;
      std::array<int, kNumShapes> shape_count{};
      for (const auto& o : scene.objects) shape_count[size_t(o.shape)]++;
      std::vector<int> unique_shapes, absent_shapes;
      for (int sh = 0; sh < kNumShapes; ++sh) {
        if (shape_count[size_t(sh)] == 1) unique_shapes.push_back(sh);
        if (shape_count[size_t(sh)] == 0) absent_shapes.push_back(sh);
      }
      const int64_t pick = rng.below(3);
      int shape = -1, color = -1;
      const char* label = nullptr;
      if (pick == 2 && !absent_shapes.empty()) {
        shape = absent_shapes[size_t(rng.below(int64_t(absent_shapes.size())))];
        color = int(rng.below(kNumColors));
        label = "neutral";
      } else if (!unique_shapes.empty()) {
        shape = unique_shapes[size_t(rng.below(int64_t(unique_shapes.size())))];
        int actual = -1;
        for (const auto& o : scene.objects)
          if (o.shape == shape) actual = o.color;
        if (pick == 0) {
          color = actual;
          label = "entails";
        } else {
          color = int(rng.below(kNumColors - 1));
          if (color >= actual) ++color;
          label = "contradicts";
        }
      } else {
        // All shapes duplicated (cannot happen with distinct combos <= 4
        // objects, kept as a guard) or no absent shape for neutral.
        shape = absent_shapes.empty() ? 0 : absent_shapes[0];
        color = int(rng.below(kNumColors));
        label = "neutral";
      }
      s.text = {vocab.id("the"), vocab.shape_id(shape), vocab.id("is"), vocab.color_id(color)};
      s.target = {vocab.id(label)};
      break;
    }
    case TaskKind::qa: {
      const int k = 1 + int(rng.below(3));
      Scene scene = make_scene(rng, g, k);
      s.grid = scene.grid;
      std::array<int, kNumShapes> shape_count{};
      for (const auto& o : scene.objects) shape_count[size_t(o.shape)]++;
      std::vector<int> unique_shapes;
      for (int sh = 0; sh < kNumShapes; ++sh)
        if (shape_count[size_t(sh)] == 1) unique_shapes.push_back(sh);
      const bool ask_color = !unique_shapes.empty() && rng.below(2) == 0;
      if (ask_color) {
        const int shape = unique_shapes[size_t(rng.below(int64_t(unique_shapes.size())))];
        int actual = -1;
        for (const auto& o : scene.objects)
          if (o.shape == shape) actual = o.color;
        s.text = {vocab.id("what"), vocab.id("color"), vocab.id("is"), vocab.id("the"),
                  vocab.shape_id(shape)};
        s.target = {vocab.color_id(actual)};
      } else {
        s.text = {vocab.id("how"), vocab.id("many"), vocab.id("objects")};
        s.target = {vocab.count_id(int(scene.objects.size()))};
      }
      for (int c = 0; c < kNumColors; ++c) s.candidates.push_back({vocab.color_id(c)});
      for (int n = 0; n < int(TaskVocab::counts().size()); ++n)
        s.candidates.push_back({vocab.count_id(n)});
      break;
    }
    case TaskKind::copy: {
      // Denoising copy: random filler tokens in, same tokens out. The grid
      // carries an unrelated scene so the encoder sees both modalities.
      Scene scene = make_scene(rng, g, 1 + int(rng.below(2)));
      s.grid = scene.grid;
      const int len = 3 + int(rng.below(4));
      for (int i = 0; i < len; ++i)
        s.text.push_back(vocab.filler(int(rng.below(vocab.num_filler()))));
      s.target = s.text;
      break;
    }
  }
  if (s.target.empty()) throw std::logic_error("generate_sample: empty target");
  return s;
}

// Deterministic in (kind, seed, n, g); per-sample independent streams.
inline std::vector<TaskSample> generate_dataset(TaskKind kind, uint64_t seed, int n, int g,
                                                const TaskVocab& vocab) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  if (vocab.grid_side() != g) {
    throw std::invalid_argument("generate_dataset: vocab built for grid side " +
                                std::to_string(vocab.grid_side()) + ", requested " +
                                std::to_string(g));
  }
  std::vector<TaskSample> out;
  out.reserve(size_t(n));
  Rng base(seed);
  for (int i = 0; i < n; ++i) {
    out.push_back(generate_sample(kind, vocab, base.fork(uint64_t(i)), g));
  }
  return out;
}

uint64_t sample_hash(const TaskSample& s);

struct DatasetSplit {
  std::vector<TaskSample> train;
  std::vector<TaskSample> eval;
};

// Train and eval come from disjoint seed streams; eval samples whose content
// collides with a train sample are resampled, so the splits never share a
// sample. Deterministic in (kind, seed, sizes, g).
inline DatasetSplit make_splits(TaskKind kind, uint64_t seed, int n_train, int n_eval, int g,
                                const TaskVocab& vocab) {
  Rng base(seed);
  const uint64_t train_seed = base.fork(0x7261696Eull).bits();
  Rng eval_base(base.fork(0x6576616Cull).bits());
  DatasetSplit split;
  split.train = generate_dataset(kind, train_seed, n_train, g, vocab);
  std::set<uint64_t> seen;
  for (const auto& s : split.train) seen.insert(sample_hash(s));
  split.eval.reserve(size_t(n_eval));
  for (int i = 0; i < n_eval; ++i) {
    for (uint64_t attempt = 0;; ++attempt) {
      if (attempt > 10000) {
        throw std::runtime_error("make_splits: sample space too small for disjoint splits");
      }
      TaskSample s =
          generate_sample(kind, vocab, eval_base.fork(uint64_t(i) * 1000003ull + attempt), g);
      if (!seen.count(sample_hash(s))) {
        split.eval.push_back(std::move(s));
        break;
      }
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Parses a predicted token sequence as a box; nullopt when malformed.
inline std::optional<Box> parse_box(const std::vector<int>& tokens, const TaskVocab& vocab) {
  if (tokens.size() != 4) return std::nullopt;
  for (int t : tokens)
    if (!vocab.is_coord(t)) return std::nullopt;
  Box b{vocab.coord_value(tokens[0]), vocab.coord_value(tokens[1]),
        vocab.coord_value(tokens[2]), vocab.coord_value(tokens[3])};
  if (!b.valid()) return std::nullopt;
  return b;
}

inline double acc_at_05(const std::vector<std::optional<Box>>& preds,
                        const std::vector<Box>& golds) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("acc_at_05: size mismatch " + std::to_string(preds.size()) +
                                " vs " + std::to_string(golds.size()));
  }
  if (preds.empty()) return 0.0;
  int hit = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] && iou(*preds[i], golds[i]) >= 0.5) ++hit;
  }
  return double(hit) / double(preds.size());
}

// Sentence BLEU with uniform 1..4-gram weights and brevity penalty. Any
// zero clipped precision forces a zero score.
inline double bleu4(const std::vector<int>& candidate,
                    const std::vector<std::vector<int>>& references) {
  if (references.empty()) throw std::invalid_argument("bleu4: no references");
  const size_t c = candidate.size();
  if (c == 0) return 0.0;

  // Reference length closest to the candidate length (ties: shorter).
  size_t r = references[0].size();
  for (const auto& ref : references) {
    const auto d = [&](size_t len) {
      return len > c ? len - c : c - len;
    };
    if (d(ref.size()) < d(r) || (d(ref.size()) == d(r) && ref.size() < r)) r = ref.size();
  }

  double log_prec = 0.0;
  for (size_t n = 1; n <= 4; ++n) {
    if (c < n) return 0.0;
    std::map<std::vector<int>, int> clip;
    for (const auto& ref : references) {
      if (ref.size() < n) continue;
      std::map<std::vector<int>, int> counts;
      for (size_t i = 0; i + n <= ref.size(); ++i) {
        counts[std::vector<int>(ref.begin() + long(i), ref.begin() + long(i + n))]++;
      }
      for (const auto& [ng, cnt] : counts) clip[ng] = std::max(clip[ng], cnt);
    }
    int matched = 0;
    std::map<std::vector<int>, int> used;
    const int total = int(c - n + 1);
    for (size_t i = 0; i + n <= c; ++i) {
      std::vector<int> ng(candidate.begin() + long(i), candidate.begin() + long(i + n));
      auto it = clip.find(ng);
      if (it != clip.end() && used[ng] < it->second) {
        ++used[ng];
        ++matched;
      }
    }
    if (matched == 0) return 0.0;
    log_prec += std::log(double(matched) / double(total));
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - double(r) / double(c));
  return bp * std::exp(log_prec / 4.0);
}

inline double accuracy(const std::vector<std::vector<int>>& preds,
                       const std::vector<std::vector<int>>& golds) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("accuracy: size mismatch " + std::to_string(preds.size()) +
                                " vs " + std::to_string(golds.size()));
  }
  if (preds.empty()) return 0.0;
  int hit = 0;
  for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return double(hit) / double(preds.size());
}

// ---------------------------------------------------------------------------
// Line-delimited persistence. One sample per line; fields tab-separated;
// tokens space-separated; qa candidates joined by " | ".
// ---------------------------------------------------------------------------

inline std::string sample_to_line(const TaskSample& s, const TaskVocab& vocab) {
  std::ostringstream os;
  os << task_kind_name(s.kind) << '\t';
  for (size_t i = 0; i < s.grid.size(); ++i) os << (i ? " " : "") << s.grid[i];
  os << '\t' << vocab.decode(s.text) << '\t' << vocab.decode(s.target) << '\t';
  for (size_t i = 0; i < s.candidates.size(); ++i) {
    if (i) os << " | ";
    os << vocab.decode(s.candidates[i]);
  }
  return os.str();
}

inline TaskSample sample_from_line(const std::string& line, const TaskVocab& vocab, int g) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(cur);
  if (fields.size() != 5) {
    throw std::runtime_error("dataset line: expected 5 tab-separated fields, got " +
                             std::to_string(fields.size()));
  }
  auto split_ws = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
  };
  TaskSample s;
  s.kind = task_kind_from(fields[0]);
  s.g = g;
  for (const auto& w : split_ws(fields[1])) s.grid.push_back(std::stoi(w));
  if (int64_t(s.grid.size()) != int64_t(g) * g) {
    throw std::runtime_error("dataset line: grid has " + std::to_string(s.grid.size()) +
                             " cells, expected " + std::to_string(g * g));
  }
  s.text = vocab.encode(split_ws(fields[2]));
  s.target = vocab.encode(split_ws(fields[3]));
  std::vector<std::string> words = split_ws(fields[4]);
  std::vector<std::string> group;
  for (const auto& w : words) {
    if (w == "|") {
      s.candidates.push_back(vocab.encode(group));
      group.clear();
    } else {
      group.push_back(w);
    }
  }
  if (!group.empty()) s.candidates.push_back(vocab.encode(group));
  return s;
}

inline void save_dataset(const std::vector<TaskSample>& ds, const TaskVocab& vocab,
                         const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_dataset: cannot open " + path);
  for (const auto& s : ds) f << sample_to_line(s, vocab) << '\n';
}

inline std::vector<TaskSample> load_dataset(const std::string& path, const TaskVocab& vocab,
                                            int g) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
  std::vector<TaskSample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(sample_from_line(line, vocab, g));
  }
  return out;
}

// Stable content hash, used by split discipline checks.
inline uint64_t sample_hash(const TaskSample& s) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(uint64_t(s.kind));
  for (int v : s.grid) mix(uint64_t(v) + 0x9E37);
  for (int v : s.text) mix(uint64_t(v) + 0xABCD);
  for (int v : s.target) mix(uint64_t(v) + 0x1234);
  return h;
}

}  // namespace peftlab
