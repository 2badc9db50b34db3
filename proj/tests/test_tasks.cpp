#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "peftlab/tasks.hpp"

using namespace peftlab;

TEST_CASE("iou oracle cases", "[tasks]") {
  Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 7, 7}) == 0.0);
  // Hand computation: intersection 1, union 4 + 4 - 1 = 7.
  CHECK(iou(a, Box{1, 1, 3, 3}) == Catch::Approx(1.0 / 7.0).margin(1e-12));
  // Degenerate zero-area boxes: union 0 maps to 0.
  CHECK(iou(Box{1, 1, 1, 1}, Box{1, 1, 1, 1}) == 0.0);
}

TEST_CASE("iou symmetry property", "[tasks]") {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    auto rand_box = [&]() {
      int x1 = int(rng.below(6)), y1 = int(rng.below(6));
      return Box{x1, y1, x1 + 1 + int(rng.below(4)), y1 + 1 + int(rng.below(4))};
    };
    Box a = rand_box(), b = rand_box();
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, a) == 1.0);
    double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("acc_at_05 counts misses and malformed predictions", "[tasks]") {
  std::vector<Box> golds = {{0, 0, 2, 2}, {0, 0, 2, 2}, {0, 0, 2, 2}};
  std::vector<std::optional<Box>> preds = {Box{0, 0, 2, 2}, Box{1, 1, 3, 3}, std::nullopt};
  // Second prediction has iou 1/7 < 0.5: a miss.
  CHECK(acc_at_05(preds, golds) == Catch::Approx(1.0 / 3.0));
  CHECK(acc_at_05({}, {}) == 0.0);
  CHECK_THROWS_AS(acc_at_05(preds, {golds[0]}), std::invalid_argument);
}

TEST_CASE("bleu4 trivial cases", "[tasks]") {
  std::vector<int> cand = {1, 2, 3, 4, 5, 6};
  CHECK(bleu4(cand, {cand}) == Catch::Approx(1.0).margin(1e-12));
  CHECK(bleu4(cand, {{7, 8, 9, 10, 11, 12}}) == 0.0);
  CHECK_THROWS_AS(bleu4(cand, {}), std::invalid_argument);
}

TEST_CASE("bleu4 matches hand n-gram tabulation", "[tasks]") {
  // candidate: a red circle on the grid   (6 tokens)
  // reference: a red circle on the small grid  (7 tokens)
  // 1-grams 6/6, 2-grams 4/5, 3-grams 3/4, 4-grams 2/3, BP = exp(1 - 7/6).
  std::vector<int> cand = {1, 2, 3, 4, 5, 6};
  std::vector<int> ref = {1, 2, 3, 4, 5, 9, 6};
  const double want =
      std::exp(1.0 - 7.0 / 6.0) *
      std::pow((6.0 / 6.0) * (4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0), 0.25);
  CHECK(bleu4(cand, {ref}) == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("bleu4 stays in range and improves with the candidate as reference", "[tasks]") {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    std::vector<int> cand, ref;
    const int lc = 4 + int(rng.below(6)), lr = 4 + int(rng.below(6));
    for (int i = 0; i < lc; ++i) cand.push_back(int(rng.below(5)));
    for (int i = 0; i < lr; ++i) ref.push_back(int(rng.below(5)));
    const double base = bleu4(cand, {ref});
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    const double with_self = bleu4(cand, {ref, cand});
    CHECK(with_self >= base);
    CHECK(with_self == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("accuracy", "[tasks]") {
  std::vector<std::vector<int>> a = {{1}, {2}, {3}, {4}};
  std::vector<std::vector<int>> b = {{1}, {2}, {3}, {5}};
  CHECK(accuracy(a, a) == 1.0);
  CHECK(accuracy(a, {{9}, {9}, {9}, {9}}) == 0.0);
  CHECK(accuracy(a, b) == 0.75);
  CHECK_THROWS_AS(accuracy(a, {{1}}), std::invalid_argument);
}

TEST_CASE("dataset generation is deterministic and seed-sensitive", "[tasks]") {
  const int g = 6;
  TaskVocab vocab(g);
  for (TaskKind kind : {TaskKind::refer, TaskKind::caption, TaskKind::entail, TaskKind::qa,
                        TaskKind::copy}) {
    auto a = generate_dataset(kind, 99, 40, g, vocab);
    auto b = generate_dataset(kind, 99, 40, g, vocab);
    auto c = generate_dataset(kind, 100, 40, g, vocab);
    REQUIRE(a.size() == 40);
    bool same = true, diff = false;
    for (size_t i = 0; i < a.size(); ++i) {
      same = same && sample_hash(a[i]) == sample_hash(b[i]);
      diff = diff || sample_hash(a[i]) != sample_hash(c[i]);
    }
    CHECK(same);
    CHECK(diff);
  }
}

TEST_CASE("refer targets match a scan-the-grid oracle", "[tasks]") {
  const int g = 8;
  TaskVocab vocab(g);
  auto ds = generate_dataset(TaskKind::refer, 4242, 300, g, vocab);
  for (const auto& s : ds) {
    REQUIRE(s.text.size() == 3);
    REQUIRE(s.target.size() == 4);
    // Re-derive the box by scanning for the queried symbol.
    int color = -1, shape = -1;
    for (int c = 0; c < kNumColors; ++c)
      if (s.text[1] == vocab.color_id(c)) color = c;
    for (int sh = 0; sh < kNumShapes; ++sh)
      if (s.text[2] == vocab.shape_id(sh)) shape = sh;
    REQUIRE(color >= 0);
    REQUIRE(shape >= 0);
    const int sym = object_symbol(shape, color);
    int x1 = g, y1 = g, x2 = 0, y2 = 0;
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x)
        if (s.grid[size_t(y * g + x)] == sym) {
          x1 = std::min(x1, x);
          y1 = std::min(y1, y);
          x2 = std::max(x2, x + 1);
          y2 = std::max(y2, y + 1);
        }
    REQUIRE(x2 > 0);
    auto got = parse_box(s.target, vocab);
    REQUIRE(got.has_value());
    CHECK(*got == Box{x1, y1, x2, y2});
  }
}

TEST_CASE("entail labels are consistent with the grid", "[tasks]") {
  const int g = 6;
  TaskVocab vocab(g);
  auto ds = generate_dataset(TaskKind::entail, 77, 300, g, vocab);
  int labels_seen[3] = {0, 0, 0};
  for (const auto& s : ds) {
    REQUIRE(s.text.size() == 4);
    REQUIRE(s.target.size() == 1);
    int shape = -1, color = -1;
    for (int sh = 0; sh < kNumShapes; ++sh)
      if (s.text[1] == vocab.shape_id(sh)) shape = sh;
    for (int c = 0; c < kNumColors; ++c)
      if (s.text[3] == vocab.color_id(c)) color = c;
    REQUIRE(shape >= 0);
    REQUIRE(color >= 0);
    // Count grid cells per color of this shape.
    std::set<int> colors_of_shape;
    for (int cell : s.grid) {
      if (cell != kEmptySymbol && (cell - 1) / kNumColors == shape) {
        colors_of_shape.insert((cell - 1) % kNumColors);
      }
    }
    const int label = s.target[0];
    if (colors_of_shape.empty()) {
      CHECK(label == vocab.id("neutral"));
      labels_seen[2]++;
    } else if (colors_of_shape.count(color)) {
      CHECK(label == vocab.id("entails"));
      labels_seen[0]++;
    } else {
      CHECK(label == vocab.id("contradicts"));
      labels_seen[1]++;
    }
  }
  // All three labels occur.
  CHECK(labels_seen[0] > 0);
  CHECK(labels_seen[1] > 0);
  CHECK(labels_seen[2] > 0);
}

TEST_CASE("qa answers and candidate sets", "[tasks]") {
  const int g = 6;
  TaskVocab vocab(g);
  auto ds = generate_dataset(TaskKind::qa, 13, 200, g, vocab);
  for (const auto& s : ds) {
    REQUIRE(!s.candidates.empty());
    CHECK(s.candidates.size() <= 32);
    bool target_in_candidates = false;
    for (const auto& c : s.candidates) target_in_candidates |= c == s.target;
    CHECK(target_in_candidates);
  }
}

TEST_CASE("generation fails cleanly on an impossible grid", "[tasks]") {
  TaskVocab vocab(1);
  CHECK_THROWS_WITH(generate_dataset(TaskKind::refer, 1, 50, 1, vocab),
                    Catch::Matchers::ContainsSubstring("too small"));
}

TEST_CASE("train and eval seed streams share no sample", "[tasks]") {
  const int g = 8;
  TaskVocab vocab(g);
  Rng seeds(2024);
  const uint64_t train_seed = seeds.fork(1).bits();
  const uint64_t eval_seed = seeds.fork(2).bits();
  for (TaskKind kind : {TaskKind::refer, TaskKind::entail, TaskKind::qa}) {
    auto train = generate_dataset(kind, train_seed, 500, g, vocab);
    auto eval = generate_dataset(kind, eval_seed, 200, g, vocab);
    std::set<uint64_t> train_hashes;
    for (const auto& s : train) train_hashes.insert(sample_hash(s));
    for (const auto& s : eval) CHECK_FALSE(train_hashes.count(sample_hash(s)));
  }
}

TEST_CASE("dataset round-trips through the line format", "[tasks]") {
  const int g = 5;
  TaskVocab vocab(g);
  auto path = std::filesystem::temp_directory_path() / "peftlab_tasks_roundtrip.tsv";
  for (TaskKind kind : {TaskKind::refer, TaskKind::caption, TaskKind::qa}) {
    auto ds = generate_dataset(kind, 5, 25, g, vocab);
    save_dataset(ds, vocab, path.string());
    auto back = load_dataset(path.string(), vocab, g);
    REQUIRE(back.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
      CHECK(ds[i].grid == back[i].grid);
      CHECK(ds[i].text == back[i].text);
      CHECK(ds[i].target == back[i].target);
      CHECK(ds[i].candidates == back[i].candidates);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("vocab layout", "[tasks]") {
  TaskVocab vocab(8);
  CHECK(vocab.id("<pad>") == TaskVocab::kPad);
  CHECK(vocab.id("<bos>") == TaskVocab::kBos);
  CHECK(vocab.id("<eos>") == TaskVocab::kEos);
  CHECK(vocab.id("<sep>") == TaskVocab::kSep);
  CHECK(vocab.size() >= 180);
  CHECK(vocab.size() <= 220);
  CHECK(vocab.is_coord(vocab.coord(0)));
  CHECK(vocab.coord_value(vocab.coord(8)) == 8);
  CHECK_THROWS_AS(vocab.coord(9), std::out_of_range);
  CHECK(vocab.decode(vocab.encode({"find", "red", "circle"})) == "find red circle");
}
