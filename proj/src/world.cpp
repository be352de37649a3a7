#include "lami/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "lami/errors.hpp"
#include "lami/vocab.hpp"

namespace lami {
namespace {

using json = nlohmann::json;

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(rng, i)]);
}

constexpr std::array<std::string_view, 16> kOnsets = {"ba", "da", "fe", "gi", "ko", "lu", "mi", "no",
                                                      "pa", "ri", "sa", "tu", "vo", "we", "zi", "ju"};
constexpr std::array<std::string_view, 16> kCodas = {"dax", "wug", "fep", "tov", "blick", "zup",
                                                     "kiv", "mon", "rel", "sab", "tig", "pog",
                                                     "lun", "fim", "dor", "nak"};

std::string object_name(std::size_t i) {
  return std::string(kOnsets[i % 16]) + std::string(kCodas[(7 * i + i / 16) % 16]);
}

bool in_shape(std::size_t shape, std::size_t s, std::size_t r, std::size_t c) {
  const double half = static_cast<double>(s) / 2.0;
  const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
  switch (shape) {
    case 0:
      return true;
    case 1:
      return (x - half) * (x - half) + (y - half) * (y - half) <= half * half;
    case 2:
      return std::abs(x - half) <= static_cast<double>(r + 1) / 2.0;
    default:
      return r >= s / 3 && r < 2 * s / 3;
  }
}

std::string fill_template(std::string_view tpl, const std::string& object, const Attributes& a) {
  std::string out;
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] != '{') {
      out.push_back(tpl[i++]);
      continue;
    }
    const auto close = tpl.find('}', i);
    if (close == std::string_view::npos) throw TemplateError("unterminated slot in template '" + std::string(tpl) + "'");
    const auto slot = tpl.substr(i + 1, close - i - 1);
    if (slot == "object") out += object;
    else if (slot == "color") out += attr_value_name(AttrKind::color, a.color);
    else if (slot == "shape") out += attr_value_name(AttrKind::shape, a.shape);
    else if (slot == "size") out += attr_value_name(AttrKind::size, a.size);
    else throw TemplateError("unknown template slot '{" + std::string(slot) + "}'");
    i = close + 1;
  }
  return out;
}

PartialAttributes filled_slots(std::string_view tpl, const Attributes& a) {
  PartialAttributes p;
  for (auto kind : kAttrKinds)
    if (tpl.find("{" + std::string(attr_kind_name(kind)) + "}") != std::string_view::npos) p.set(kind, a.get(kind));
  return p;
}

std::string color_of(const Attributes& a) { return std::string(attr_value_name(AttrKind::color, a.color)); }
std::string shape_of(const Attributes& a) { return std::string(attr_value_name(AttrKind::shape, a.shape)); }
std::string size_of(const Attributes& a) { return std::string(attr_value_name(AttrKind::size, a.size)); }

json attrs_json(const Attributes& a) {
  return {{"color", color_of(a)}, {"shape", shape_of(a)}, {"size", size_of(a)}};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  return in;
}

std::size_t lookup_value(AttrKind kind, const std::string& word) {
  auto v = attr_value_of(kind, word);
  if (!v) throw DataError("unknown " + std::string(attr_kind_name(kind)) + " '" + word + "'");
  return *v;
}

std::size_t lookup_object(const WorldSpec& world, const std::string& name) {
  auto o = world.find(name);
  if (!o) throw DataError("unknown object '" + name + "'");
  return *o;
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string_view attr_kind_name(AttrKind kind) {
  switch (kind) {
    case AttrKind::color: return "color";
    case AttrKind::shape: return "shape";
    default: return "size";
  }
}

std::size_t attr_cardinality(AttrKind kind) {
  switch (kind) {
    case AttrKind::color: return kColorNames.size();
    case AttrKind::shape: return kShapeNames.size();
    default: return kSizeNames.size();
  }
}

std::string_view attr_value_name(AttrKind kind, std::size_t value) {
  if (value >= attr_cardinality(kind)) throw IndexError("attribute value out of range");
  switch (kind) {
    case AttrKind::color: return kColorNames[value];
    case AttrKind::shape: return kShapeNames[value];
    default: return kSizeNames[value];
  }
}

std::optional<std::size_t> attr_value_of(AttrKind kind, std::string_view word) {
  for (std::size_t v = 0; v < attr_cardinality(kind); ++v)
    if (attr_value_name(kind, v) == word) return v;
  return std::nullopt;
}

std::size_t Attributes::get(AttrKind kind) const {
  switch (kind) {
    case AttrKind::color: return color;
    case AttrKind::shape: return shape;
    default: return size;
  }
}

void Attributes::set(AttrKind kind, std::size_t value) {
  const auto v = static_cast<std::uint8_t>(value);
  switch (kind) {
    case AttrKind::color: color = v; break;
    case AttrKind::shape: shape = v; break;
    default: size = v;
  }
}

std::optional<std::size_t> PartialAttributes::get(AttrKind kind) const {
  const auto& slot = kind == AttrKind::color ? color : kind == AttrKind::shape ? shape : size;
  if (!slot) return std::nullopt;
  return *slot;
}

void PartialAttributes::set(AttrKind kind, std::size_t value) {
  const auto v = static_cast<std::uint8_t>(value);
  switch (kind) {
    case AttrKind::color: color = v; break;
    case AttrKind::shape: shape = v; break;
    default: size = v;
  }
}

std::size_t PartialAttributes::count() const {
  return static_cast<std::size_t>(color.has_value()) + shape.has_value() + size.has_value();
}

std::optional<std::size_t> WorldSpec::find(std::string_view name) const {
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (objects[i].name == name) return i;
  return std::nullopt;
}

WorldSpec build_world(std::uint64_t seed, std::size_t n_objects) {
  if (n_objects < 16) throw ArgumentError("need at least 16 objects so every attribute value appears twice");
  if (n_objects > 256) throw ArgumentError("at most 256 objects");
  std::mt19937_64 rng(splitmix64(seed));
  WorldSpec w;
  w.seed = seed;
  w.objects.resize(n_objects);
  for (std::size_t i = 0; i < n_objects; ++i) w.objects[i].name = object_name(i);
  for (auto kind : kAttrKinds) {
    std::vector<std::size_t> values(n_objects);
    for (std::size_t i = 0; i < n_objects; ++i) values[i] = i % attr_cardinality(kind);
    shuffle(values, rng);
    for (std::size_t i = 0; i < n_objects; ++i) w.objects[i].attrs.set(kind, values[i]);
  }
  return w;
}

std::array<double, 3> color_rgb(std::size_t color) {
  static constexpr std::array<std::array<double, 3>, 8> table = {{
      {0.9, 0.1, 0.1},
      {0.1, 0.8, 0.1},
      {0.1, 0.2, 0.9},
      {0.95, 0.9, 0.1},
      {0.55, 0.1, 0.7},
      {1.0, 0.55, 0.0},
      {1.0, 0.6, 0.8},
      {0.45, 0.25, 0.1},
  }};
  return table.at(color);
}

ImageSample render(const Attributes& requested, std::uint64_t render_seed, double eps) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ArgumentError("eps must lie in [0,1]");
  std::mt19937_64 rng(splitmix64(render_seed));
  ImageSample img;
  img.requested = requested;
  img.meta = requested;
  img.seed = render_seed;
  for (auto kind : kAttrKinds) {
    if (unit(rng) < eps) {
      const std::size_t card = attr_cardinality(kind);
      img.meta.set(kind, (requested.get(kind) + 1 + below(rng, card - 1)) % card);
    }
  }
  const std::size_t s = img.meta.size == 0 ? 6 : 12;
  const long jx = static_cast<long>(below(rng, 5)) - 2;
  const long jy = static_cast<long>(below(rng, 5)) - 2;
  const long x0 = static_cast<long>((kImageSide - s) / 2) + jx;
  const long y0 = static_cast<long>((kImageSide - s) / 2) + jy;
  img.pixels.fill(kBackground);
  const auto rgb = color_rgb(img.meta.color);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) {
      if (!in_shape(img.meta.shape, s, r, c)) continue;
      const auto y = static_cast<std::size_t>(y0 + static_cast<long>(r));
      const auto x = static_cast<std::size_t>(x0 + static_cast<long>(c));
      for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[(y * kImageSide + x) * kImageChannels + ch] = rgb[ch];
    }
  return img;
}

ParsedText parse_text(std::string_view text, const WorldSpec& world) {
  ParsedText p;
  const auto words = split_words(text);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& w = words[i];
    if (!p.object) {
      if (auto o = world.find(w)) {
        p.object = o;
        continue;
      }
    }
    for (auto kind : kAttrKinds)
      if (!p.mentioned.get(kind))
        if (auto v = attr_value_of(kind, w)) p.mentioned.set(kind, *v);
    const bool next_of = i + 1 < words.size() && words[i + 1] == "of";
    if (!p.asked) {
      if (w == "color" && next_of) p.asked = AttrKind::color;
      else if (w == "shape" && next_of) p.asked = AttrKind::shape;
      else if (w == "larger" || w == "smaller") p.asked = AttrKind::size;
    }
  }
  return p;
}

std::vector<Caption> make_captions(const WorldSpec& world, const std::vector<std::string>& templates) {
  if (templates.empty()) throw ArgumentError("make_captions needs at least one template");
  std::vector<Caption> out;
  for (std::size_t o = 0; o < world.objects.size(); ++o)
    for (const auto& t : templates) {
      const auto& obj = world.objects[o];
      Caption c{fill_template(t, obj.name, obj.attrs), std::nullopt, filled_slots(t, obj.attrs)};
      if (t.find("{object}") != std::string::npos) c.object = o;
      out.push_back(std::move(c));
    }
  return out;
}

bool HeldoutFacts::contains(std::size_t object) const {
  return std::binary_search(objects.begin(), objects.end(), object);
}

Corpora emit_corpora(const WorldSpec& world, double heldout_fraction, std::uint64_t seed, double eps) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ArgumentError("heldout_fraction must lie in (0,1)");
  const auto n = world.objects.size();
  const auto n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(n)));
  if (n_held < 8) throw ArgumentError("heldout_fraction leaves fewer than 8 held-out objects");
  if (n_held >= n) throw ArgumentError("heldout_fraction leaves no training objects");
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedf00dULL));

  std::vector<std::vector<std::size_t>> by_color(kColorNames.size());
  for (std::size_t o = 0; o < n; ++o) by_color[world.objects[o].attrs.color].push_back(o);
  for (auto& b : by_color) shuffle(b, rng);
  std::vector<std::size_t> color_order(kColorNames.size());
  for (std::size_t c = 0; c < color_order.size(); ++c) color_order[c] = c;
  shuffle(color_order, rng);
  Corpora out;
  for (std::size_t round = 0; out.heldout.objects.size() < n_held; ++round)
    for (auto c : color_order)
      if (round < by_color[c].size() && out.heldout.objects.size() < n_held) out.heldout.objects.push_back(by_color[c][round]);
  std::sort(out.heldout.objects.begin(), out.heldout.objects.end());

  std::vector<std::size_t> train;
  for (std::size_t o = 0; o < n; ++o)
    if (!out.heldout.contains(o)) train.push_back(o);

  std::uint64_t render_counter = 0;
  auto pair = [&](std::string caption, std::optional<std::size_t> object, const Attributes& a) {
    const auto s = splitmix64(seed * 0x100000001b3ULL + render_counter++);
    out.paired_set.push_back({std::move(caption), object, render(a, s, eps)});
  };

  auto& lm = out.lm_corpus;
  for (auto o : train) {
    const auto& obj = world.objects[o];
    const auto& a = obj.attrs;
    const auto& nm = obj.name;
    lm.push_back("the " + nm + " is " + color_of(a) + " .");
    lm.push_back("the " + nm + " is a " + shape_of(a) + " .");
    lm.push_back("the " + nm + " is " + size_of(a) + " .");
    lm.push_back("the " + nm + " is a " + size_of(a) + " " + color_of(a) + " " + shape_of(a) + " .");
    const auto color_q = "what is the color of the " + nm + " ? it is " + color_of(a) + " .";
    const auto shape_q = "what is the shape of the " + nm + " ? it is a " + shape_of(a) + " .";
    lm.push_back(color_q);
    lm.push_back(shape_q);
    pair(color_q, o, a);
    pair(shape_q, o, a);
    pair("the " + nm + " is a " + size_of(a) + " " + color_of(a) + " " + shape_of(a) + " .", o, a);

    std::vector<std::size_t> partners;
    for (auto p : train)
      if (world.objects[p].attrs.size != a.size) partners.push_back(p);
    shuffle(partners, rng);
    partners.resize(std::min<std::size_t>(partners.size(), 4));
    for (std::size_t j = 0; j < partners.size(); ++j) {
      const auto q = "is the " + nm + " larger than the " + world.objects[partners[j]].name +
                     " ? answer : " + (a.size == 1 ? "yes" : "no") + " .";
      lm.push_back(q);
      if (j < 2) pair(q, o, a);
    }
  }
  for (std::size_t o = 0; o < n; ++o) {
    const auto& obj = world.objects[o];
    lm.push_back("i saw the " + obj.name + " .");
    lm.push_back("look at the " + obj.name + " .");
    pair("i saw the " + obj.name + " .", o, obj.attrs);
    pair("look at the " + obj.name + " .", o, obj.attrs);
  }
  for (std::size_t sz = 0; sz < kSizeNames.size(); ++sz)
    for (std::size_t col = 0; col < kColorNames.size(); ++col)
      for (std::size_t sh = 0; sh < kShapeNames.size(); ++sh) {
        Attributes a;
        a.size = static_cast<std::uint8_t>(sz);
        a.color = static_cast<std::uint8_t>(col);
        a.shape = static_cast<std::uint8_t>(sh);
        const std::vector<std::string> generic = {
            "a " + size_of(a) + " " + color_of(a) + " " + shape_of(a) + " .",
            "what is the color of the " + size_of(a) + " " + shape_of(a) + " ? it is " + color_of(a) + " .",
            "what is the shape of the " + size_of(a) + " " + color_of(a) + " one ? it is a " + shape_of(a) + " .",
        };
        for (const auto& g : generic) {
          lm.push_back(g);
          pair(g, std::nullopt, a);
        }
      }
  return out;
}

std::string_view qa_task_name(QaTask task) {
  switch (task) {
    case QaTask::color: return "color";
    case QaTask::shape: return "shape";
    default: return "size-yesno";
  }
}

QaTask parse_qa_task(std::string_view name) {
  if (name == "color") return QaTask::color;
  if (name == "shape") return QaTask::shape;
  if (name == "size-yesno") return QaTask::size_yesno;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::vector<QaItem> make_qa(const WorldSpec& world, const HeldoutFacts& heldout, QaTask task) {
  std::vector<QaItem> items;
  for (auto o : heldout.objects) {
    if (o >= world.objects.size()) throw IndexError("held-out object out of range");
    const auto& obj = world.objects[o];
    if (task == QaTask::color) {
      QaItem q{"What is the color of the " + obj.name + "? It is", {}, obj.attrs.color, task, {o}, 0};
      for (auto c : kColorNames) q.candidates.emplace_back(c);
      items.push_back(std::move(q));
    } else if (task == QaTask::shape) {
      QaItem q{"What is the shape of the " + obj.name + "? It is a", {}, obj.attrs.shape, task, {o}, 0};
      for (auto s : kShapeNames) q.candidates.emplace_back(s);
      items.push_back(std::move(q));
    } else {
      for (auto b : heldout.objects) {
        const auto& other = world.objects[b];
        if (b == o || other.attrs.size == obj.attrs.size) continue;
        items.push_back({"Is the " + obj.name + " larger than the " + other.name + "? Answer:",
                         {"yes", "no"},
                         obj.attrs.size > other.attrs.size ? 0u : 1u,
                         task,
                         {o, b},
                         0});
      }
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) items[i].seed = i;
  return items;
}

void write_corpus(const std::vector<std::string>& sentences, const std::string& path) {
  auto out = open_out(path);
  for (const auto& s : sentences) out << s << '\n';
}

std::vector<std::string> read_corpus(const std::string& path) {
  auto in = open_in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

void write_paired_jsonl(const std::vector<PairedExample>& set, const WorldSpec& world, const std::string& path) {
  auto out = open_out(path);
  for (const auto& p : set) {
    json attrs = attrs_json(p.image.meta);
    attrs["object"] = p.object ? json(world.objects.at(*p.object).name) : json(nullptr);
    out << json{{"caption", p.caption}, {"attrs", attrs}, {"seed", p.image.seed}}.dump() << '\n';
  }
}

void write_qa_jsonl(const std::vector<QaItem>& items, const WorldSpec& world, const std::string& path) {
  auto out = open_out(path);
  for (const auto& q : items) {
    json objects = json::array();
    for (auto o : q.objects) objects.push_back(world.objects.at(o).name);
    json attrs{{"task", qa_task_name(q.task)}, {"objects", objects}};
    out << json{{"prompt", q.prompt}, {"candidates", q.candidates}, {"gold", q.gold}, {"attrs", attrs}, {"seed", q.seed}}.dump()
        << '\n';
  }
}

std::vector<QaItem> read_qa_jsonl(const std::string& path, const WorldSpec& world) {
  auto in = open_in(path);
  std::vector<QaItem> items;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      QaItem q;
      q.prompt = j.at("prompt").get<std::string>();
      q.candidates = j.at("candidates").get<std::vector<std::string>>();
      q.gold = j.at("gold").get<std::size_t>();
      q.seed = j.at("seed").get<std::uint64_t>();
      q.task = parse_qa_task(j.at("attrs").at("task").get<std::string>());
      for (const auto& name : j.at("attrs").at("objects")) q.objects.push_back(lookup_object(world, name.get<std::string>()));
      if (q.candidates.empty() || q.gold >= q.candidates.size()) throw DataError("gold index outside candidates");
      items.push_back(std::move(q));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return items;
}

void write_world_json(const WorldSpec& world, const std::string& path) {
  json objects = json::array();
  for (const auto& o : world.objects) {
    json j = attrs_json(o.attrs);
    j["name"] = o.name;
    objects.push_back(j);
  }
  auto out = open_out(path);
  out << json{{"seed", world.seed}, {"objects", objects}}.dump(2) << '\n';
}

WorldSpec read_world_json(const std::string& path) {
  auto in = open_in(path);
  try {
    const auto j = json::parse(in);
    WorldSpec w;
    w.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& o : j.at("objects")) {
      WorldObject obj;
      obj.name = o.at("name").get<std::string>();
      for (auto kind : kAttrKinds) obj.attrs.set(kind, lookup_value(kind, o.at(std::string(attr_kind_name(kind))).get<std::string>()));
      w.objects.push_back(std::move(obj));
    }
    return w;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

void write_ppm(const ImageSample& image, const std::string& path) {
  auto out = open_out(path);
  out << "P6\n" << kImageSide << ' ' << kImageSide << "\n255\n";
  for (double v : image.pixels) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
}

std::string ppm_filename(std::string_view object, std::uint64_t seed) {
  return std::string(object) + "_" + std::to_string(seed) + ".ppm";
}

}  // namespace lami
