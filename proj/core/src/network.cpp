#include "sdtc/network.hpp"

#include <cmath>

#include "sdtc/error.hpp"

namespace sdtc {

// ---- ModelConfig ---------------------------------------------------------------------

namespace {

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0 || kernel > in) return 0;
  return (in - kernel) / stride + 1;
}

}  // namespace

Extent2 ModelConfig::conv_output() const {
  return {conv_extent(window_length, conv_kernel.rows, conv_stride.rows),
          conv_extent(channels, conv_kernel.cols, conv_stride.cols)};
}

std::size_t ModelConfig::basic_channels() const {
  if (capsule_channels) return capsule_channels;
  return capsule_dim ? filters / capsule_dim : 0;
}

Extent2 ModelConfig::basic_kernel() const {
  const Extent2 in = conv_output();
  Extent2 k = capsule_kernel;
  if (k.cols == 0 || k.cols > in.cols) k.cols = in.cols;
  if (k.rows == 0 || k.rows > in.rows) k.rows = in.rows;
  return k;
}

Extent2 ModelConfig::basic_output() const {
  const Extent2 in = conv_output();
  const Extent2 k = basic_kernel();
  return {conv_extent(in.rows, k.rows, capsule_stride.rows), conv_extent(in.cols, k.cols, capsule_stride.cols)};
}

std::size_t ModelConfig::num_basic_capsules() const {
  const Extent2 out = basic_output();
  return out.rows * out.cols * basic_channels();
}

std::size_t ModelConfig::head_input() const { return use_lstm ? lstm_units : num_advanced * advanced_dim; }

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  need(window_length > 0, "input.window_length must be positive");
  need(channels > 0, "input.channels must be positive");
  need(filters > 0, "convolution.filters must be positive");
  need(conv_kernel.rows > 0 && conv_kernel.cols > 0, "convolution.kernel_size must be positive");
  need(conv_stride.rows > 0 && conv_stride.cols > 0, "convolution.strides must be positive");
  need(capsule_dim > 0, "basic_capsule.dimensions must be positive");
  if (capsule_dim > 0 && capsule_channels == 0) {
    need(filters % capsule_dim == 0, "convolution.filters (" + std::to_string(filters) +
                                         ") must be divisible by basic_capsule.dimensions (" +
                                         std::to_string(capsule_dim) + ")");
  }
  need(capsule_stride.rows > 0 && capsule_stride.cols > 0, "basic_capsule.strides must be positive");
  need(num_advanced > 0, "advanced_capsule.num_capsules must be positive");
  need(advanced_dim > 0, "advanced_capsule.dimensions must be positive");
  need(routing_iterations >= 1, "advanced_capsule.routing_iterations must be at least 1");
  need(sequence_length >= 1, "lstm.sequence_length must be at least 1");
  if (use_lstm) need(lstm_units > 0, "lstm.units must be positive");
  if (!use_lstm) need(sequence_length == 1, "lstm.sequence_length must be 1 when the LSTM is disabled");
  for (std::size_t i = 0; i < fnn.size(); ++i) {
    need(fnn[i].neurons > 0, "output.fnn[" + std::to_string(i) + "].neurons must be positive");
    need(fnn[i].dropout >= 0.0 && fnn[i].dropout < 1.0, "output.fnn[" + std::to_string(i) + "].dropout must be in [0,1)");
  }
  need(fnn_activation == "relu" || fnn_activation == "tanh", "output.activation must be 'relu' or 'tanh'");
  need(std::isfinite(output_scale) && output_scale > 0.0, "output.scale must be positive");
  if (window_length > 0 && channels > 0 && conv_kernel.rows > 0 && conv_kernel.cols > 0) {
    const Extent2 c = conv_output();
    need(c.rows > 0 && c.cols > 0, "convolution kernel larger than the " + std::to_string(window_length) + "x" +
                                       std::to_string(channels) + " frame");
    if (c.rows > 0 && c.cols > 0 && capsule_stride.rows > 0 && capsule_stride.cols > 0) {
      const Extent2 b = basic_output();
      need(b.rows > 0 && b.cols > 0, "basic capsule kernel larger than the convolution output");
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

namespace {

nlohmann::json extent_json(const Extent2& e) { return nlohmann::json::array({e.rows, e.cols}); }

Extent2 extent_from(const nlohmann::json& j, Extent2 fallback) {
  if (j.is_null()) return fallback;
  const auto v = j.get<std::vector<std::size_t>>();
  if (v.size() != 2) throw ConfigError({"extent must have two entries"});
  return {v[0], v[1]};
}

template <typename T>
T value_or(const nlohmann::json& section, const char* key, T fallback) {
  if (!section.is_object() || !section.contains(key) || section.at(key).is_null()) return fallback;
  return section.at(key).get<T>();
}

const nlohmann::json& section_of(const nlohmann::json& doc, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  return doc.is_object() && doc.contains(name) ? doc.at(name) : empty;
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json fnn = nlohmann::json::array();
  for (const auto& layer : c.fnn) fnn.push_back({{"neurons", layer.neurons}, {"dropout", layer.dropout}});
  return {
      {"input", {{"window_length", c.window_length}, {"channels", c.channels}}},
      {"convolution", {{"filters", c.filters}, {"kernel_size", extent_json(c.conv_kernel)}, {"strides", extent_json(c.conv_stride)}}},
      {"basic_capsule",
       {{"dimensions", c.capsule_dim},
        {"channels", c.capsule_channels},
        {"kernel_size", extent_json(c.capsule_kernel)},
        {"strides", extent_json(c.capsule_stride)}}},
      {"advanced_capsule",
       {{"num_capsules", c.num_advanced}, {"dimensions", c.advanced_dim}, {"routing_iterations", c.routing_iterations}}},
      {"lstm", {{"enabled", c.use_lstm}, {"units", c.lstm_units}, {"sequence_length", c.sequence_length}}},
      {"output", {{"fnn", fnn}, {"activation", c.fnn_activation}, {"scale", c.output_scale}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& doc) {
  ModelConfig c;
  try {
    const auto& input = section_of(doc, "input");
    c.window_length = value_or<std::size_t>(input, "window_length", c.window_length);
    c.channels = value_or<std::size_t>(input, "channels", c.channels);
    const auto& conv = section_of(doc, "convolution");
    c.filters = value_or<std::size_t>(conv, "filters", c.filters);
    c.conv_kernel = extent_from(conv.value("kernel_size", nlohmann::json()), c.conv_kernel);
    c.conv_stride = extent_from(conv.value("strides", nlohmann::json()), c.conv_stride);
    const auto& basic = section_of(doc, "basic_capsule");
    c.capsule_dim = value_or<std::size_t>(basic, "dimensions", c.capsule_dim);
    c.capsule_channels = value_or<std::size_t>(basic, "channels", c.capsule_channels);
    c.capsule_kernel = extent_from(basic.value("kernel_size", nlohmann::json()), c.capsule_kernel);
    c.capsule_stride = extent_from(basic.value("strides", nlohmann::json()), c.capsule_stride);
    const auto& adv = section_of(doc, "advanced_capsule");
    c.num_advanced = value_or<std::size_t>(adv, "num_capsules", c.num_advanced);
    c.advanced_dim = value_or<std::size_t>(adv, "dimensions", c.advanced_dim);
    c.routing_iterations = value_or<std::size_t>(adv, "routing_iterations", c.routing_iterations);
    const auto& lstm = section_of(doc, "lstm");
    c.use_lstm = value_or<bool>(lstm, "enabled", c.use_lstm);
    c.lstm_units = value_or<std::size_t>(lstm, "units", c.lstm_units);
    c.sequence_length = value_or<std::size_t>(lstm, "sequence_length", c.sequence_length);
    const auto& out = section_of(doc, "output");
    if (out.contains("fnn")) {
      c.fnn.clear();
      for (const auto& layer : out.at("fnn")) {
        c.fnn.push_back({layer.at("neurons").get<std::size_t>(), layer.value("dropout", 0.0)});
      }
    }
    c.fnn_activation = value_or<std::string>(out, "activation", c.fnn_activation);
    c.output_scale = value_or<double>(out, "scale", c.output_scale);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({std::string("model config: ") + e.what()});
  }
  return c;
}

// ---- capsule primitives -------------------------------------------------------------

std::vector<double> squash(std::span<const double> s) {
  constexpr double kEps = 1e-12;
  double sq = 0.0;
  for (double x : s) sq += x * x;
  const double factor = sq / ((1.0 + sq) * (std::sqrt(sq) + kEps));
  std::vector<double> v(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) v[i] = factor * s[i];
  return v;
}

RoutingResult dynamic_routing(const Tensor& predictions, std::size_t iterations) {
  if (predictions.rank() != 3) throw ShapeError("dynamic_routing: predictions must be [I, J, Da]");
  if (iterations == 0) throw ShapeError("dynamic_routing: at least one iteration required");
  const std::size_t in = predictions.extent(0), out = predictions.extent(1), da = predictions.extent(2);
  Tensor logits({in, out});
  Tensor coupling({in, out});
  Tensor outputs({out, da});
  std::vector<double> s(da);
  for (std::size_t r = 0; r < iterations; ++r) {
    coupling = softmax(logits, 1);
    for (std::size_t j = 0; j < out; ++j) {
      std::fill(s.begin(), s.end(), 0.0);
      for (std::size_t i = 0; i < in; ++i) {
        const double c = coupling[i * out + j];
        const double* u = predictions.data() + (i * out + j) * da;
        for (std::size_t e = 0; e < da; ++e) s[e] += c * u[e];
      }
      const auto v = squash(s);
      std::copy(v.begin(), v.end(), outputs.data() + j * da);
    }
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t j = 0; j < out; ++j) {
        const double* u = predictions.data() + (i * out + j) * da;
        const double* v = outputs.data() + j * da;
        double agreement = 0.0;
        for (std::size_t e = 0; e < da; ++e) agreement += u[e] * v[e];
        logits[i * out + j] += agreement;
      }
    }
  }
  return {std::move(outputs), {std::move(logits), std::move(coupling)}};
}

// ---- parameters -----------------------------------------------------------------------

namespace {

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  std::map<std::string, Shape> shapes;
  const std::size_t basic_out = c.basic_channels() * c.capsule_dim;
  const Extent2 bk = c.basic_kernel();
  shapes["conv.kernel"] = {c.conv_kernel.rows, c.conv_kernel.cols, 1, c.filters};
  shapes["conv.bias"] = {c.filters};
  shapes["basic.kernel"] = {bk.rows, bk.cols, c.filters, basic_out};
  shapes["basic.bias"] = {basic_out};
  shapes["routing.transform"] = {c.num_basic_capsules(), c.num_advanced, c.advanced_dim, c.capsule_dim};
  const std::size_t frame_features = c.num_advanced * c.advanced_dim;
  if (c.use_lstm) {
    shapes["lstm.input_weight"] = {frame_features, 4 * c.lstm_units};
    shapes["lstm.recurrent_weight"] = {c.lstm_units, 4 * c.lstm_units};
    shapes["lstm.bias"] = {4 * c.lstm_units};
  }
  std::size_t width = c.head_input();
  for (std::size_t i = 0; i < c.fnn.size(); ++i) {
    shapes["fnn." + std::to_string(i) + ".weight"] = {width, c.fnn[i].neurons};
    shapes["fnn." + std::to_string(i) + ".bias"] = {c.fnn[i].neurons};
    width = c.fnn[i].neurons;
  }
  shapes["output.weight"] = {width, 1};
  shapes["output.bias"] = {1};
  return shapes;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

ParameterSet init_parameters(const ModelConfig& c, std::mt19937_64& rng) {
  c.validate();
  const auto shapes = parameter_shapes(c);
  ParameterSet p;
  // Fixed initialization order keeps a seed's parameters stable.
  {
    const auto& s = shapes.at("conv.kernel");
    p["conv.kernel"] = glorot_uniform(s, s[0] * s[1] * s[2], s[0] * s[1] * s[3], rng);
    p["conv.bias"] = Tensor::zeros(shapes.at("conv.bias"));
  }
  {
    const auto& s = shapes.at("basic.kernel");
    p["basic.kernel"] = glorot_uniform(s, s[0] * s[1] * s[2], s[0] * s[1] * s[3], rng);
    p["basic.bias"] = Tensor::zeros(shapes.at("basic.bias"));
  }
  {
    std::normal_distribution<double> dist(0.0, 0.05);
    Tensor w(shapes.at("routing.transform"));
    for (auto& v : w.values()) v = dist(rng);
    p["routing.transform"] = std::move(w);
  }
  if (c.use_lstm) {
    const auto& si = shapes.at("lstm.input_weight");
    const auto& sr = shapes.at("lstm.recurrent_weight");
    p["lstm.input_weight"] = glorot_uniform(si, si[0], si[1], rng);
    p["lstm.recurrent_weight"] = glorot_uniform(sr, sr[0], sr[1], rng);
    Tensor bias(shapes.at("lstm.bias"));
    for (std::size_t h = 0; h < c.lstm_units; ++h) bias[c.lstm_units + h] = 1.0;  // forget gate
    p["lstm.bias"] = std::move(bias);
  }
  for (std::size_t i = 0; i < c.fnn.size(); ++i) {
    const std::string prefix = "fnn." + std::to_string(i);
    const auto& s = shapes.at(prefix + ".weight");
    p[prefix + ".weight"] = glorot_uniform(s, s[0], s[1], rng);
    p[prefix + ".bias"] = Tensor::zeros(shapes.at(prefix + ".bias"));
  }
  {
    const auto& s = shapes.at("output.weight");
    p["output.weight"] = glorot_uniform(s, s[0], s[1], rng);
    p["output.bias"] = Tensor::zeros({1});
  }
  return p;
}

void check_parameters(const ModelConfig& config, const ParameterSet& params) {
  const auto shapes = parameter_shapes(config);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(shape));
    }
  }
  if (params.size() != shapes.size()) throw ShapeError("parameter set has entries the configuration does not use");
}

BoundParameters::BoundParameters(Tape& tape, const ParameterSet& params) : tape_(&tape) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.variable(value));
}

Var BoundParameters::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ShapeError("unknown parameter '" + name + "'");
  return it->second;
}

ParameterSet BoundParameters::gradients() const {
  ParameterSet grads;
  for (const auto& [name, var] : vars_) grads.emplace(name, tape_->grad(var));
  return grads;
}

// ---- forward pass --------------------------------------------------------------------

Var conv_features(const ModelConfig& c, const BoundParameters& p, Var frames) {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != c.window_length || s[2] != c.channels || s[3] != 1) {
    throw ShapeError("conv_features: frames " + shape_string(s) + " do not match a " + std::to_string(c.window_length) +
                     "x" + std::to_string(c.channels) + " frame");
  }
  return ad::tanh(ad::conv2d(frames, p["conv.kernel"], p["conv.bias"], c.conv_stride.rows, c.conv_stride.cols));
}

Var build_basic_capsules(const ModelConfig& c, const BoundParameters& p, Var feature_maps) {
  if (c.capsule_channels == 0 && (c.capsule_dim == 0 || c.filters % c.capsule_dim != 0)) {
    throw ShapeError("build_basic_capsules: filters not divisible by capsule dimension");
  }
  Var maps = ad::conv2d(feature_maps, p["basic.kernel"], p["basic.bias"], c.capsule_stride.rows, c.capsule_stride.cols);
  const std::size_t n = maps.shape()[0];
  return ad::squash(ad::reshape(maps, {n, c.num_basic_capsules(), c.capsule_dim}));
}

Var advanced_capsules(const ModelConfig& c, const BoundParameters& p, Var basic, const ForwardOptions& options) {
  Var predictions = ad::capsule_predict(basic, p["routing.transform"]);
  const Shape& ps = predictions.shape();
  const std::size_t n = ps[0], in = ps[1], out = ps[2], da = ps[3];
  Tensor coupling;
  if (options.frozen_coupling) {
    if (options.frozen_coupling->shape() != Shape{n, in, out}) {
      throw ShapeError("advanced_capsules: frozen coupling has shape " + shape_string(options.frozen_coupling->shape()));
    }
    coupling = *options.frozen_coupling;
  } else {
    coupling = Tensor({n, in, out});
    const Tensor& values = predictions.value();
    for (std::size_t b = 0; b < n; ++b) {
      Tensor one({in, out, da}, std::vector<double>(values.data() + b * in * out * da,
                                                    values.data() + (b + 1) * in * out * da));
      const RoutingResult r = dynamic_routing(one, c.routing_iterations);
      std::copy(r.state.coupling.values().begin(), r.state.coupling.values().end(), coupling.data() + b * in * out);
    }
  }
  if (options.coupling_out) *options.coupling_out = coupling;
  return ad::squash(ad::coupled_sum(predictions, coupling));
}

Var lstm_forward(const BoundParameters& p, Var sequence, std::size_t units) {
  const Shape& s = sequence.shape();
  if (s.size() != 3 || s[1] == 0) throw ShapeError("lstm_forward: sequence must be a non-empty [B, S, F]");
  Tape& tape = *sequence.tape();
  const std::size_t batch = s[0], steps = s[1];
  Var wx = p["lstm.input_weight"], wh = p["lstm.recurrent_weight"], bias = p["lstm.bias"];
  Var h = tape.constant(Tensor::zeros({batch, units}));
  Var cell = tape.constant(Tensor::zeros({batch, units}));
  for (std::size_t t = 0; t < steps; ++t) {
    Var x = ad::select(sequence, 1, t);
    Var z = ad::add_bias(ad::add(ad::matmul(x, wx), ad::matmul(h, wh)), bias);
    Var input_gate = ad::sigmoid(ad::slice(z, 1, 0, units));
    Var forget_gate = ad::sigmoid(ad::slice(z, 1, units, 2 * units));
    Var candidate = ad::tanh(ad::slice(z, 1, 2 * units, 3 * units));
    Var output_gate = ad::sigmoid(ad::slice(z, 1, 3 * units, 4 * units));
    cell = ad::add(ad::mul(forget_gate, cell), ad::mul(input_gate, candidate));
    h = ad::mul(output_gate, ad::tanh(cell));
  }
  return h;
}

Var regression_head(const ModelConfig& c, const BoundParameters& p, Var hidden, const ForwardOptions& options) {
  if (hidden.shape().size() != 2 || hidden.shape()[1] != c.head_input()) {
    throw ShapeError("regression_head: input " + shape_string(hidden.shape()) + " does not match width " +
                     std::to_string(c.head_input()));
  }
  Tape& tape = *hidden.tape();
  Var x = hidden;
  for (std::size_t i = 0; i < c.fnn.size(); ++i) {
    const std::string prefix = "fnn." + std::to_string(i);
    x = ad::add_bias(ad::matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"]);
    x = c.fnn_activation == "tanh" ? ad::tanh(x) : ad::relu(x);
    const double rate = c.fnn[i].dropout;
    if (options.mode == Mode::training && rate > 0.0) {
      if (options.rng == nullptr) throw ShapeError("regression_head: training-mode dropout needs a random stream");
      std::bernoulli_distribution keep(1.0 - rate);
      Tensor mask(x.shape());
      for (auto& m : mask.values()) m = keep(*options.rng) ? 1.0 / (1.0 - rate) : 0.0;
      x = ad::mul(x, tape.constant(std::move(mask)));
    }
  }
  Var y = ad::add_bias(ad::matmul(x, p["output.weight"]), p["output.bias"]);
  return c.output_scale == 1.0 ? y : ad::scale(y, c.output_scale);
}

Var model_forward(Tape& tape, const ModelConfig& c, const BoundParameters& p, const Tensor& frames,
                  const ForwardOptions& options) {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != c.sequence_length || s[2] != c.window_length || s[3] != c.channels) {
    throw ShapeError("model_forward: frames " + shape_string(s) + " do not match [B, " +
                     std::to_string(c.sequence_length) + ", " + std::to_string(c.window_length) + ", " +
                     std::to_string(c.channels) + "]");
  }
  const std::size_t batch = s[0], steps = s[1];
  Var x = tape.constant(frames.reshaped({batch * steps, c.window_length, c.channels, 1}));
  Var maps = conv_features(c, p, x);
  Var basic = build_basic_capsules(c, p, maps);
  Var advanced = advanced_capsules(c, p, basic, options);
  const std::size_t per_frame = c.num_advanced * c.advanced_dim;
  Var hidden = c.use_lstm ? lstm_forward(p, ad::reshape(advanced, {batch, steps, per_frame}), c.lstm_units)
                          : ad::reshape(advanced, {batch, per_frame});
  return regression_head(c, p, hidden, options);
}

std::vector<double> predict(const ModelConfig& config, const ParameterSet& params, const Tensor& frames) {
  Tape tape;
  BoundParameters bound(tape, params);
  Var y = model_forward(tape, config, bound, frames, ForwardOptions{});
  const auto v = y.value().values();
  return {v.begin(), v.end()};
}

}  // namespace sdtc
