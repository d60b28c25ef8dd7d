#include "p2w/netgraph.hpp"

#include <charconv>
#include <map>
#include <sstream>

#include "p2w/error.hpp"

namespace p2w {
namespace {

std::size_t parse_size(std::string_view s, std::string_view what) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) {
    throw ShapeError("cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
  }
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::pair<std::size_t, std::size_t> parse_extent(std::string_view s) {
  const auto x = s.find('x');
  if (x == std::string_view::npos) {
    const std::size_t v = parse_size(s, "extent");
    return {v, v};
  }
  return {parse_size(s.substr(0, x), "extent"), parse_size(s.substr(x + 1), "extent")};
}

std::size_t build_block(Sequential& seq, const BlockSpec& b, std::size_t in_c,
                        const std::string& name, ops::Padding padding) {
  if (b.count == 0) throw ShapeError("block " + name + " (" + b.str() + ") has zero layers/units");
  if (b.kind == BlockKind::vgg) {
    if (b.depth == 0) throw ShapeError("block " + name + " has zero depth");
    std::size_t c = in_c;
    for (std::size_t k = 0; k < b.count; ++k) {
      const std::string ln = name + ".conv" + std::to_string(k + 1);
      seq.emplace<Conv2d>(ln, c, b.depth, 3, 1, padding, !b.batchnorm);
      if (b.batchnorm) seq.emplace<BatchNorm>(name + ".bn" + std::to_string(k + 1), b.depth);
      seq.emplace<Relu>(name + ".relu" + std::to_string(k + 1));
      c = b.depth;
    }
    seq.emplace<MaxPool>(name + ".pool", 2, 2);
    return b.depth;
  }
  for (const auto d : b.unit) {
    if (d == 0) throw ShapeError("block " + name + " has a zero-depth unit layer");
  }
  std::size_t c = in_c;
  for (std::size_t u = 0; u < b.count; ++u) {
    seq.emplace<ResidualUnit>(name + ".u" + std::to_string(u + 1), c, b.unit[0], b.unit[1],
                              b.unit[2], u == 0 ? 2 : 1, padding);
    c = b.unit[2];
  }
  return c;
}

std::size_t count_leaves(Layer& l) {
  std::vector<Layer*> v;
  l.collect_leaves(v);
  return v.size();
}

}  // namespace

// ------------------------------------------------------------- BlockSpec

BlockSpec BlockSpec::vgg(std::size_t depth, std::size_t count, bool bn) {
  BlockSpec b;
  b.kind = BlockKind::vgg;
  b.depth = depth;
  b.count = count;
  b.batchnorm = bn;
  return b;
}

BlockSpec BlockSpec::resnet(std::size_t l, std::size_t m, std::size_t n, std::size_t count) {
  BlockSpec b;
  b.kind = BlockKind::resnet;
  b.unit = {l, m, n};
  b.count = count;
  return b;
}

BlockSpec BlockSpec::parse(std::string_view text) {
  const std::string t = trim(text);
  const auto colon = t.find(':');
  if (colon == std::string::npos) throw ShapeError("block spec '" + t + "' lacks a kind prefix");
  const std::string kind = t.substr(0, colon);
  const std::string body = t.substr(colon + 1);
  const auto x = body.rfind('x');
  const std::string head = x == std::string::npos ? body : body.substr(0, x);
  const std::size_t count = x == std::string::npos ? 1 : parse_size(body.substr(x + 1), "count");
  if (kind == "vgg" || kind == "vggbn") {
    return vgg(parse_size(head, "depth"), count, kind == "vggbn");
  }
  if (kind == "resnet") {
    const auto d1 = head.find('-');
    const auto d2 = head.find('-', d1 == std::string::npos ? d1 : d1 + 1);
    if (d1 == std::string::npos || d2 == std::string::npos) {
      throw ShapeError("resnet block '" + t + "' needs L-M-N depths");
    }
    return resnet(parse_size(head.substr(0, d1), "depth"),
                  parse_size(head.substr(d1 + 1, d2 - d1 - 1), "depth"),
                  parse_size(head.substr(d2 + 1), "depth"), count);
  }
  throw ShapeError("unknown block kind '" + kind + "'");
}

std::vector<BlockSpec> BlockSpec::parse_list(std::string_view text) {
  std::vector<BlockSpec> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = text.substr(start, comma == std::string_view::npos ? text.npos
                                                                           : comma - start);
    if (!trim(piece).empty()) out.push_back(parse(piece));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string BlockSpec::str() const {
  if (kind == BlockKind::vgg) {
    return std::string(batchnorm ? "vggbn:" : "vgg:") + std::to_string(depth) + "x" +
           std::to_string(count);
  }
  return "resnet:" + std::to_string(unit[0]) + "-" + std::to_string(unit[1]) + "-" +
         std::to_string(unit[2]) + "x" + std::to_string(count);
}

std::string to_string(std::span<const BlockSpec> blocks) {
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) s += ",";
    s += blocks[i].str();
  }
  return s;
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::patch: return "patch";
    case Variant::allconv_no_heatmap: return "allconv_no_heatmap";
    case Variant::allconv_with_heatmap: return "allconv_with_heatmap";
    case Variant::fc_top: return "fc_top";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::patch, Variant::allconv_no_heatmap, Variant::allconv_with_heatmap,
                    Variant::fc_top}) {
    if (to_string(v) == s) return v;
  }
  throw ShapeError("unknown variant '" + std::string(s) + "'");
}

std::string_view to_string(HeatmapActivation a) {
  return a == HeatmapActivation::relu ? "relu" : "softmax";
}

HeatmapActivation parse_activation(std::string_view s) {
  if (s == "relu") return HeatmapActivation::relu;
  if (s == "softmax") return HeatmapActivation::softmax;
  throw ShapeError("unknown heatmap activation '" + std::string(s) + "'");
}

// ------------------------------------------------------------- ModelSpec

std::string ModelSpec::to_text() const {
  std::ostringstream o;
  o << "variant=" << to_string(variant) << "\n"
    << "stem=" << to_string(stem) << "\n"
    << "patch=" << patch_h << "x" << patch_w << "\n"
    << "in_channels=" << in_channels << "\n"
    << "patch_classes=" << patch_classes << "\n"
    << "padding=" << (padding == ops::Padding::same ? "same" : "valid") << "\n"
    << "top=" << to_string(top) << "\n"
    << "activation=" << to_string(activation) << "\n"
    << "pool=" << pool << "\n"
    << "fc1=" << fc1 << "\n"
    << "fc2=" << fc2 << "\n"
    << "shortcut=" << (shortcut ? 1 : 0) << "\n"
    << "image=" << image_h << "x" << image_w << "\n"
    << "classes=" << classes << "\n"
    << "seed=" << seed << "\n";
  return o.str();
}

ModelSpec ModelSpec::from_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(start, nl - start));
    start = nl + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ShapeError("model descriptor line '" + line + "' lacks '='");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ShapeError(std::string("model descriptor lacks '") + key + "'");
    return it->second;
  };
  ModelSpec s;
  s.variant = parse_variant(get("variant"));
  s.stem = BlockSpec::parse_list(get("stem"));
  std::tie(s.patch_h, s.patch_w) = parse_extent(get("patch"));
  s.in_channels = parse_size(get("in_channels"), "in_channels");
  s.patch_classes = parse_size(get("patch_classes"), "patch_classes");
  const auto& pad = get("padding");
  if (pad != "same" && pad != "valid") throw ShapeError("unknown padding '" + pad + "'");
  s.padding = pad == "same" ? ops::Padding::same : ops::Padding::valid;
  s.top = BlockSpec::parse_list(get("top"));
  s.activation = parse_activation(get("activation"));
  s.pool = parse_size(get("pool"), "pool");
  s.fc1 = parse_size(get("fc1"), "fc1");
  s.fc2 = parse_size(get("fc2"), "fc2");
  s.shortcut = get("shortcut") == "1";
  std::tie(s.image_h, s.image_w) = parse_extent(get("image"));
  s.classes = parse_size(get("classes"), "classes");
  const auto& seed = get("seed");
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(seed.data(), seed.data() + seed.size(), v);
  if (ec != std::errc() || p != seed.data() + seed.size()) throw ShapeError("bad seed '" + seed + "'");
  s.seed = v;
  return s;
}

// -------------------------------------------------------------- geometry

Geometry receptive_field(std::span<const Window> layers) {
  Geometry g;
  std::size_t offset = 0;
  for (const auto& w : layers) {
    offset += w.pad_before * g.stride;
    g.rf += (w.kernel - 1) * g.stride;
    g.stride *= w.stride;
  }
  g.pad = offset;
  return g;
}

Geometry receptive_field(const Layer& layer) {
  std::vector<Window> w;
  layer.collect_windows(w);
  return receptive_field(w);
}

// ----------------------------------------------------------------- Model

Model::Model(const Model& other)
    : spec_(other.spec_),
      net_(other.net_),
      new_layers_(other.new_layers_),
      stem_map_(other.stem_map_) {}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    spec_ = other.spec_;
    net_ = other.net_;
    new_layers_ = other.new_layers_;
    stem_map_ = other.stem_map_;
  }
  return *this;
}

Model Model::build(const ModelSpec& spec) {
  if (spec.stem.empty()) throw ShapeError("patch classifier needs at least one block");
  if (spec.patch_h == 0 || spec.patch_w == 0) throw ShapeError("patch size must be positive");
  const std::size_t factor = std::size_t{1} << spec.stem.size();
  if (spec.patch_h % factor != 0 || spec.patch_w % factor != 0) {
    throw ShapeError("patch " + std::to_string(spec.patch_h) + "x" + std::to_string(spec.patch_w) +
                     " is not divisible by the downsampling factor " + std::to_string(factor));
  }
  Model m;
  m.spec_ = spec;
  std::size_t c = spec.in_channels;
  for (std::size_t i = 0; i < spec.stem.size(); ++i) {
    const std::string name = "stem.b" + std::to_string(i + 1);
    auto& seq = m.net_.emplace<Sequential>(name);
    c = build_block(seq, spec.stem[i], c, name, spec.padding);
  }
  const std::size_t stem_c = c;

  // Probe the stem's final map at patch size.
  {
    Tensor probe(Shape{1, spec.in_channels, spec.patch_h, spec.patch_w});
    Tensor out;
    try {
      out = m.net_.forward(probe, Mode::infer);
    } catch (const ShapeError& e) {
      throw ShapeError("patch " + std::to_string(spec.patch_h) + "x" + std::to_string(spec.patch_w) +
                       " too small for stem " + to_string(spec.stem) + ": " + e.what());
    }
    m.stem_map_ = {out.shape().h, out.shape().w};
  }
  const std::size_t fh = m.stem_map_[0], fw = m.stem_map_[1];

  const std::size_t stem_leaves = count_leaves(m.net_);
  auto add_top = [&](std::size_t in_c) {
    for (std::size_t i = 0; i < spec.top.size(); ++i) {
      const std::string name = "top.b" + std::to_string(i + 1);
      auto& seq = m.net_.emplace<Sequential>(name);
      in_c = build_block(seq, spec.top[i], in_c, name, ops::Padding::same);
    }
    m.net_.emplace<GlobalAvgPool>("out.gap");
    m.net_.emplace<Dense>("out.fc", in_c, spec.classes);
  };
  auto add_heatmap = [&] {
    m.net_.emplace<AvgPool>("heat.pool", fh, fw, 1);
    m.net_.emplace<Conv2d>("heat.conv", stem_c, spec.patch_classes, 1, 1, ops::Padding::same, true);
    if (spec.activation == HeatmapActivation::relu) {
      m.net_.emplace<Relu>("heat.act");
    } else {
      m.net_.emplace<ChannelSoftmax>("heat.act");
    }
  };

  switch (spec.variant) {
    case Variant::patch:
      m.net_.emplace<GlobalAvgPool>("head.gap");
      m.net_.emplace<Dense>("head.fc", stem_c, spec.patch_classes);
      m.new_layers_ = count_leaves(m.net_);
      break;
    case Variant::allconv_no_heatmap:
      if (spec.top.empty()) throw ShapeError("allconv variant needs top blocks");
      add_top(stem_c);
      m.new_layers_ = count_leaves(m.net_) - stem_leaves;
      break;
    case Variant::allconv_with_heatmap:
      if (spec.top.empty()) throw ShapeError("allconv variant needs top blocks");
      add_heatmap();
      add_top(spec.patch_classes);
      m.new_layers_ = count_leaves(m.net_) - stem_leaves - 1;
      break;
    case Variant::fc_top: {
      if (spec.fc1 == 0 || spec.fc2 == 0) throw ShapeError("fc_top needs positive fc1 and fc2");
      if (spec.image_h < spec.patch_h || spec.image_w < spec.patch_w) {
        throw ShapeError("fc_top image size must be at least the patch size");
      }
      Tensor probe(Shape{1, spec.in_channels, spec.image_h, spec.image_w});
      const Tensor map = m.net_.forward_range(probe, Mode::infer, 0, spec.stem.size());
      const std::size_t hu = map.shape().h - fh + 1;
      const std::size_t hv = map.shape().w - fw + 1;
      add_heatmap();
      m.net_.emplace<FcTop>("fctop", spec.patch_classes, hu, hv, spec.pool, spec.fc1, spec.fc2,
                            spec.shortcut, spec.classes);
      m.new_layers_ = count_leaves(m.net_) - stem_leaves - 1;
      break;
    }
  }
  Rng rng(derive_seed(spec.seed, "init"));
  initialize_layers(m.net_, rng);
  return m;
}

Tensor Model::forward(const Tensor& x, Mode mode) { return net_.forward(x, mode); }

Tensor Model::backward(const Tensor& grad_logits, bool need_input_grad) {
  return net_.backward(grad_logits, need_input_grad);
}

std::vector<std::vector<Real>> Model::predict(const Tensor& x) {
  const Tensor logits = forward(x, Mode::infer);
  std::vector<std::vector<Real>> out;
  const std::size_t c = logits.shape().sample();
  for (std::size_t n = 0; n < logits.shape().n; ++n) {
    out.push_back(ops::softmax(std::span<const Real>(logits.plane(n), c)));
  }
  return out;
}

Tensor Model::stem_features(const Tensor& x) {
  return net_.forward_range(x, Mode::infer, 0, stem_blocks());
}

Geometry Model::stem_geometry() const {
  std::vector<Window> w;
  for (std::size_t i = 0; i < stem_blocks(); ++i) net_.at(i).collect_windows(w);
  return receptive_field(w);
}

std::size_t Model::stem_channels() const { return spec_.stem.back().out_channels(); }

std::vector<Layer*> Model::leaves() {
  std::vector<Layer*> v;
  net_.collect_leaves(v);
  return v;
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> v;
  net_.collect_params(v);
  return v;
}

std::vector<StateRef> Model::state() {
  std::vector<StateRef> v;
  net_.collect_state(v);
  return v;
}

void Model::set_trainable_top(std::optional<std::size_t> k) {
  auto lv = leaves();
  if (!k) {
    net_.set_frozen(false);
    return;
  }
  if (*k > lv.size()) {
    throw ShapeError("schedule asks for " + std::to_string(*k) + " trainable layers but the model has " +
                     std::to_string(lv.size()));
  }
  net_.set_frozen(true);
  for (std::size_t i = lv.size() - *k; i < lv.size(); ++i) lv[i]->set_frozen(false);
}

Snapshot Model::snapshot() {
  Snapshot s;
  for (const auto& p : params()) s.params.emplace_back(p.value->data().begin(), p.value->data().end());
  for (const auto& st : state()) s.state.push_back(*st.values);
  return s;
}

void Model::restore(const Snapshot& s) {
  auto ps = params();
  auto st = state();
  if (ps.size() != s.params.size() || st.size() != s.state.size()) {
    throw ShapeError("snapshot does not match model layout");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    std::copy(s.params[i].begin(), s.params[i].end(), ps[i].value->data().begin());
  }
  for (std::size_t i = 0; i < st.size(); ++i) *st[i].values = s.state[i];
}

void Model::zero_grad() {
  for (auto& p : params()) p.value->zero_grad();
}

const Dense& Model::patch_head() const {
  if (!is_patch()) throw ShapeError("patch_head: model is not a patch classifier");
  return static_cast<const Dense&>(net_.at(net_.size() - 1));
}

// ------------------------------------------------------- patch / heatmap

Model build_patch_classifier(std::span<const BlockSpec> blocks, std::size_t patch_h,
                             std::size_t patch_w, std::size_t classes, ops::Padding padding,
                             std::uint64_t seed) {
  ModelSpec s;
  s.variant = Variant::patch;
  s.stem.assign(blocks.begin(), blocks.end());
  s.patch_h = patch_h;
  s.patch_w = patch_w;
  s.patch_classes = classes;
  s.padding = padding;
  s.seed = seed;
  return Model::build(s);
}

std::vector<Real> apply_as_patch(Model& model, const Tensor& patch) {
  const Shape& s = patch.shape();
  if (!model.is_patch()) throw ShapeError("apply_as_patch: model is not a patch classifier");
  if (s.n != 1 || s.c != model.spec().in_channels || s.h != model.spec().patch_h ||
      s.w != model.spec().patch_w) {
    throw ShapeError("apply_as_patch: expected [1," + std::to_string(model.spec().in_channels) + "," +
                     std::to_string(model.spec().patch_h) + "," + std::to_string(model.spec().patch_w) +
                     "] input, got " + s.str());
  }
  return model.predict(patch).front();
}

Heatmap compute_heatmap(Model& model, const Tensor& image, HeatmapActivation activation) {
  if (!model.is_patch()) throw ShapeError("compute_heatmap: model is not a patch classifier");
  const Shape& s = image.shape();
  if (s.h < model.spec().patch_h || s.w < model.spec().patch_w) {
    throw ShapeError("compute_heatmap: image " + s.str() + " smaller than patch " +
                     std::to_string(model.spec().patch_h) + "x" + std::to_string(model.spec().patch_w));
  }
  const Tensor features = model.stem_features(image);
  const auto [fh, fw] = model.stem_map_at_patch();
  const Tensor pooled = ops::avgpool2d(features, fh, fw, 1);
  const Dense& head = model.patch_head();
  const Shape ws = head.weights().shape();
  const Tensor conv_w = head.weights().reshaped(Shape{ws.n, ws.c, 1, 1});
  Tensor logits = ops::conv2d(pooled, conv_w, head.bias().data(), 1, ops::Padding::same);
  Heatmap h;
  h.grid = activation == HeatmapActivation::relu ? ops::relu(logits) : ops::channel_softmax(logits);
  h.stride = model.stem_geometry().stride;
  h.patch_h = model.spec().patch_h;
  h.patch_w = model.spec().patch_w;
  return h;
}

Model convert_to_whole_image(const Model& patch_model, const ConversionSpec& conv) {
  if (!patch_model.is_patch()) throw ShapeError("convert: source is not a patch classifier");
  if (conv.variant == Variant::patch) throw ShapeError("convert: target variant must be whole-image");
  ModelSpec s = patch_model.spec();
  s.variant = conv.variant;
  s.top = conv.top;
  s.activation = conv.activation;
  s.classes = conv.classes;
  s.seed = conv.seed;
  if (conv.variant == Variant::fc_top) {
    s.top.clear();
    s.pool = conv.pool;
    s.fc1 = conv.fc1;
    s.fc2 = conv.fc2;
    s.shortcut = conv.shortcut;
    s.image_h = conv.image_h;
    s.image_w = conv.image_w;
  } else {
    s.pool = 1;
    s.fc1 = s.fc2 = 0;
    s.image_h = s.image_w = 0;
  }
  Model whole = Model::build(s);
  const auto& src = const_cast<Model&>(patch_model).net();
  for (std::size_t i = 0; i < patch_model.stem_blocks(); ++i) {
    whole.net().replace(i, src.at(i).clone());
  }
  if (conv.variant != Variant::allconv_no_heatmap) {
    auto& hc = static_cast<Conv2d&>(whole.net().at(patch_model.stem_blocks() + 1));
    const Dense& head = patch_model.patch_head();
    std::copy(head.weights().data().begin(), head.weights().data().end(), hc.weights().data().begin());
    std::copy(head.bias().data().begin(), head.bias().data().end(), hc.bias().data().begin());
  }
  whole.set_trainable_top(std::nullopt);
  return whole;
}

Model replace_patch_head(const Model& donor, std::size_t classes, std::uint64_t seed) {
  if (!donor.is_patch()) throw ShapeError("replace_patch_head: donor is not a patch classifier");
  ModelSpec s = donor.spec();
  s.patch_classes = classes;
  s.seed = seed;
  Model fresh = Model::build(s);
  const auto& src = const_cast<Model&>(donor).net();
  for (std::size_t i = 0; i < donor.stem_blocks(); ++i) fresh.net().replace(i, src.at(i).clone());
  return fresh;
}

}  // namespace p2w
