#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lami {

inline constexpr std::array<std::string_view, 8> kColorNames = {
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "brown"};
inline constexpr std::array<std::string_view, 4> kShapeNames = {"square", "disc", "triangle", "bar"};
inline constexpr std::array<std::string_view, 2> kSizeNames = {"small", "large"};

enum class AttrKind : std::uint8_t { color, shape, size };
inline constexpr std::array<AttrKind, 3> kAttrKinds = {AttrKind::color, AttrKind::shape, AttrKind::size};

std::string_view attr_kind_name(AttrKind kind);
std::size_t attr_cardinality(AttrKind kind);
std::string_view attr_value_name(AttrKind kind, std::size_t value);
/// Index of `word` among the values of `kind`, if it is one.
std::optional<std::size_t> attr_value_of(AttrKind kind, std::string_view word);

struct Attributes {
  std::uint8_t color = 0;
  std::uint8_t shape = 0;
  std::uint8_t size = 0;

  std::size_t get(AttrKind kind) const;
  void set(AttrKind kind, std::size_t value);
  bool operator==(const Attributes&) const = default;
};

/// Attributes that a piece of text mentions; absent slots are unmentioned.
struct PartialAttributes {
  std::optional<std::uint8_t> color, shape, size;

  std::optional<std::size_t> get(AttrKind kind) const;
  void set(AttrKind kind, std::size_t value);
  std::size_t count() const;
  bool operator==(const PartialAttributes&) const = default;
};

struct WorldObject {
  std::string name;
  Attributes attrs;
};

struct WorldSpec {
  std::uint64_t seed = 0;
  std::vector<WorldObject> objects;

  std::optional<std::size_t> find(std::string_view name) const;
};

/// Balanced attribute table: each value of each attribute is used
/// floor or ceil of n / cardinality times, assigned by seeded shuffles.
WorldSpec build_world(std::uint64_t seed, std::size_t n_objects);

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageValues = kImageSide * kImageSide * kImageChannels;

struct ImageSample {
  /// Row-major y, x, channel; all values in [0,1].
  std::array<double, kImageValues> pixels{};
  Attributes requested;
  /// What was actually drawn.
  Attributes meta;
  std::uint64_t seed = 0;

  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * kImageSide + x) * kImageChannels + c];
  }
  bool corrupted() const { return !(meta == requested); }
};

inline constexpr double kBackground = 0.5;
std::array<double, 3> color_rgb(std::size_t color);

/// Each attribute is independently replaced, with probability eps, by a
/// uniformly chosen different value before drawing.
ImageSample render(const Attributes& requested, std::uint64_t render_seed, double eps);

struct ParsedText {
  std::optional<std::size_t> object;
  PartialAttributes mentioned;
  /// Attribute a question asks about ("color of", "shape of", "larger than").
  std::optional<AttrKind> asked;
};

/// Word-level parse against the world's names and attribute vocabulary.
ParsedText parse_text(std::string_view text, const WorldSpec& world);

struct Caption {
  std::string text;
  std::optional<std::size_t> object;
  /// Attribute slots the template filled.
  PartialAttributes attrs;
};

/// Fills each template for each object. Slots: {object} {color} {shape} {size}.
std::vector<Caption> make_captions(const WorldSpec& world, const std::vector<std::string>& templates);

struct PairedExample {
  std::string caption;
  std::optional<std::size_t> object;
  ImageSample image;
};

struct HeldoutFacts {
  /// Objects whose attribute sentences are withheld from the LM corpus.
  std::vector<std::size_t> objects;

  bool contains(std::size_t object) const;
};

struct Corpora {
  std::vector<std::string> lm_corpus;
  std::vector<PairedExample> paired_set;
  HeldoutFacts heldout;
};

/// Held-out objects are drawn round-robin over colors so each color is
/// held out equally often. Paired images are rendered at eps.
Corpora emit_corpora(const WorldSpec& world, double heldout_fraction, std::uint64_t seed,
                     double eps = 0.0);

enum class QaTask : std::uint8_t { color, shape, size_yesno };
std::string_view qa_task_name(QaTask task);
QaTask parse_qa_task(std::string_view name);

struct QaItem {
  std::string prompt;
  std::vector<std::string> candidates;
  std::size_t gold = 0;
  QaTask task = QaTask::color;
  std::vector<std::size_t> objects;
  std::uint64_t seed = 0;
};

/// Questions about held-out objects. size_yesno pairs two held-out objects
/// of different size, in both orders.
std::vector<QaItem> make_qa(const WorldSpec& world, const HeldoutFacts& heldout, QaTask task);

// File formats.
void write_corpus(const std::vector<std::string>& sentences, const std::string& path);
std::vector<std::string> read_corpus(const std::string& path);
void write_paired_jsonl(const std::vector<PairedExample>& set, const WorldSpec& world,
                        const std::string& path);
void write_qa_jsonl(const std::vector<QaItem>& items, const WorldSpec& world, const std::string& path);
std::vector<QaItem> read_qa_jsonl(const std::string& path, const WorldSpec& world);
void write_world_json(const WorldSpec& world, const std::string& path);
WorldSpec read_world_json(const std::string& path);
/// Binary P6, maxval 255.
void write_ppm(const ImageSample& image, const std::string& path);
std::string ppm_filename(std::string_view object, std::uint64_t seed);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace lami
