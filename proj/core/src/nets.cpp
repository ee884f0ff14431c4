#include "fbsdeco/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/rng.hpp"

namespace fbsdeco {

using nlohmann::json;

std::vector<std::size_t> MLPConfig::layer_dims() const {
  std::vector<std::size_t> dims;
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  return dims;
}

void MLPConfig::check() const {
  if (input_dim < 1 || output_dim < 1)
    throw ContractError("MLPConfig: input/output dims must be >= 1");
  for (std::size_t w : hidden)
    if (w < 1) throw ContractError("MLPConfig: hidden widths must be >= 1");
  if (!batchnorm.empty() && batchnorm.size() != depth())
    throw ContractError("MLPConfig: batchnorm flags must cover every layer");
}

MLPConfig default_mlp_config(std::size_t state_dim, std::size_t output_dim,
                             OutputMap map, bool time_input,
                             std::size_t hidden_width) {
  MLPConfig c;
  c.input_dim = state_dim + (time_input ? 1 : 0);
  const std::size_t w = hidden_width ? hidden_width : state_dim + 10;
  c.hidden = {w, w, w};
  c.output_dim = output_dim;
  c.output_map = map;
  c.time_input = time_input;
  c.batchnorm.assign(c.depth(), true);
  c.batchnorm.back() = false;  // output layer feeds psi directly
  return c;
}

namespace {
std::string bn_slot_name(std::size_t slot) {
  return slot == 0 ? std::string("bn_in") : "bn" + std::to_string(slot - 1);
}
}  // namespace

std::vector<ParameterSet::NamedTensor> ParameterSet::trainable() {
  std::vector<NamedTensor> out;
  if (!bn.empty() && bn[0].present()) {
    out.push_back({"bn_in.gamma", &bn[0].gamma});
    out.push_back({"bn_in.beta", &bn[0].beta});
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back({"w" + std::to_string(i), &weights[i]});
    out.push_back({"b" + std::to_string(i), &biases[i]});
    if (i + 1 < bn.size() && bn[i + 1].present()) {
      out.push_back({"bn" + std::to_string(i) + ".gamma", &bn[i + 1].gamma});
      out.push_back({"bn" + std::to_string(i) + ".beta", &bn[i + 1].beta});
    }
  }
  return out;
}

std::vector<ParameterSet::NamedTensor> ParameterSet::all_tensors() {
  std::vector<NamedTensor> out;
  for (std::size_t slot = 0; slot < bn.size(); ++slot) {
    if (!bn[slot].present()) continue;
    const std::string base = bn_slot_name(slot);
    out.push_back({base + ".gamma", &bn[slot].gamma});
    out.push_back({base + ".beta", &bn[slot].beta});
    out.push_back({base + ".run_mean", &bn[slot].run_mean});
    out.push_back({base + ".run_var", &bn[slot].run_var});
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back({"w" + std::to_string(i), &weights[i]});
    out.push_back({"b" + std::to_string(i), &biases[i]});
  }
  return out;
}

bool ParameterSet::operator==(const ParameterSet& o) const {
  if (weights.size() != o.weights.size() || biases.size() != o.biases.size() ||
      bn.size() != o.bn.size())
    return false;
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (!(weights[i] == o.weights[i]) || !(biases[i] == o.biases[i]))
      return false;
  for (std::size_t i = 0; i < bn.size(); ++i) {
    if (bn[i].present() != o.bn[i].present()) return false;
    if (bn[i].present() &&
        (!(bn[i].gamma == o.bn[i].gamma) || !(bn[i].beta == o.bn[i].beta) ||
         !(bn[i].run_mean == o.bn[i].run_mean) ||
         !(bn[i].run_var == o.bn[i].run_var)))
      return false;
  }
  return true;
}

ParameterSet init_params(const MLPConfig& config, std::uint64_t seed) {
  config.check();
  RngStream rng(seed, stream_tag::kInit);
  const auto dims = config.layer_dims();
  ParameterSet p;
  p.bn.resize(config.depth() + 1);
  auto fresh_bn = [](BatchNormState& s, std::size_t width) {
    s.gamma = Tensor::full({width}, 1.0);
    s.beta = Tensor::zeros({width});
    s.run_mean = Tensor::zeros({width});
    s.run_var = Tensor::full({width}, 1.0);
  };
  if (config.input_bn) fresh_bn(p.bn[0], config.input_dim);
  for (std::size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    const std::size_t fan_in = dims[layer];
    const std::size_t fan_out = dims[layer + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_out, fan_in});
    for (std::size_t i = 0; i < w.numel(); ++i)
      w[i] = rng.uniform(-bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Tensor::zeros({fan_out}));
    if (config.bn_at(layer)) fresh_bn(p.bn[layer + 1], fan_out);
  }
  return p;
}

BoundNet bind_net(Tape& tape, const MLPConfig& config, ParameterSet& params) {
  BoundNet net;
  net.config = &config;
  net.params = &params;
  if (config.input_bn) {
    net.in_gamma = tape.parameter(params.bn[0].gamma);
    net.in_beta = tape.parameter(params.bn[0].beta);
  }
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    BoundNet::Layer l;
    l.w = tape.parameter(params.weights[i]);
    l.b = tape.parameter(params.biases[i]);
    if (config.bn_at(i)) {
      l.gamma = tape.parameter(params.bn[i + 1].gamma);
      l.beta = tape.parameter(params.bn[i + 1].beta);
    }
    net.layers.push_back(l);
  }
  return net;
}

NodeId batchnorm_forward(Tape& tape, BatchNormState& state, NodeId gamma,
                         NodeId beta, NodeId input, NetMode mode, double eps,
                         double momentum) {
  if (mode == NetMode::kEval) {
    return tape.batchnorm_eval(input, gamma, beta, eps, state.run_mean,
                               state.run_var);
  }
  NodeId out = tape.batchnorm_train(input, gamma, beta, eps);
  if (mode == NetMode::kTrain) {
    const Node& n = tape.node(out);
    const Tensor& mean = n.aux[0];
    const Tensor& var = n.aux[3];
    for (std::size_t j = 0; j < mean.numel(); ++j) {
      state.run_mean[j] = momentum * state.run_mean[j] + (1.0 - momentum) * mean[j];
      state.run_var[j] = momentum * state.run_var[j] + (1.0 - momentum) * var[j];
    }
  }
  return out;  // kBatchStats: batch statistics, running stats untouched
}

NodeId mlp_forward(Tape& tape, const BoundNet& net, NodeId input) {
  const MLPConfig& cfg = *net.config;
  ParameterSet& params = *net.params;
  const Tensor& x = tape.value(input);
  if (x.rank() != 2 || x.dim(1) != cfg.input_dim)
    throw ShapeError("mlp_forward: input must be (batch x input_dim)");

  NodeId h = input;
  if (cfg.input_bn) {
    h = batchnorm_forward(tape, params.bn[0], net.in_gamma, net.in_beta, h,
                          params.mode, cfg.bn_eps, cfg.bn_momentum);
  }
  const std::size_t depth = net.layers.size();
  for (std::size_t i = 0; i < depth; ++i) {
    const BoundNet::Layer& l = net.layers[i];
    h = tape.add_rows(tape.matmul_nt(h, l.w), l.b);
    if (cfg.bn_at(i)) {
      h = batchnorm_forward(tape, params.bn[i + 1], l.gamma, l.beta, h,
                            params.mode, cfg.bn_eps, cfg.bn_momentum);
    }
    if (i + 1 < depth) h = tape.relu(h);
  }
  switch (cfg.output_map) {
    case OutputMap::kIdentity: return h;
    case OutputMap::kSoftmax: return tape.softmax(h);
    case OutputMap::kNonneg: return tape.relu(h);
  }
  return h;
}

NodeId net_forward_tx(Tape& tape, const BoundNet& net, double t_norm, NodeId x) {
  NodeId input = x;
  if (net.config->time_input) {
    const std::size_t batch = tape.value(x).dim(0);
    input = tape.concat_cols(tape.constant(Tensor::full({batch, 1}, t_norm)), x);
  }
  return mlp_forward(tape, net, input);
}

Tensor output_softmax(const Tensor& logits) {
  Tape t;
  return t.value(t.softmax(t.constant(logits)));
}

Tensor output_nonneg(const Tensor& values) {
  Tape t;
  return t.value(t.relu(t.constant(values)));
}

NetworkBundle::Entry* NetworkBundle::find(const std::string& role) {
  for (auto& e : entries)
    if (e.role == role) return &e;
  return nullptr;
}

const NetworkBundle::Entry* NetworkBundle::find(const std::string& role) const {
  for (const auto& e : entries)
    if (e.role == role) return &e;
  return nullptr;
}

NetworkBundle::Entry& NetworkBundle::at(const std::string& role) {
  if (Entry* e = find(role)) return *e;
  throw ContractError("NetworkBundle: missing role '" + role + "'");
}

const NetworkBundle::Entry& NetworkBundle::at(const std::string& role) const {
  if (const Entry* e = find(role)) return *e;
  throw ContractError("NetworkBundle: missing role '" + role + "'");
}

void NetworkBundle::set_mode(NetMode mode) {
  for (auto& e : entries) e.params.mode = mode;
}

namespace {

json config_to_json(const MLPConfig& c) {
  json j;
  j["input_dim"] = c.input_dim;
  j["hidden"] = c.hidden;
  j["output_dim"] = c.output_dim;
  j["activation"] = "relu";
  j["output_map"] = c.output_map == OutputMap::kSoftmax   ? "softmax"
                    : c.output_map == OutputMap::kNonneg ? "nonneg"
                                                         : "identity";
  j["input_bn"] = c.input_bn;
  j["batchnorm"] = std::vector<bool>(c.batchnorm.begin(), c.batchnorm.end());
  j["time_input"] = c.time_input;
  j["bn_eps"] = c.bn_eps;
  j["bn_momentum"] = c.bn_momentum;
  return j;
}

MLPConfig config_from_json(const json& j) {
  MLPConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.output_dim = j.at("output_dim").get<std::size_t>();
  const std::string map = j.at("output_map").get<std::string>();
  c.output_map = map == "softmax"  ? OutputMap::kSoftmax
                 : map == "nonneg" ? OutputMap::kNonneg
                                   : OutputMap::kIdentity;
  c.input_bn = j.at("input_bn").get<bool>();
  c.batchnorm = j.at("batchnorm").get<std::vector<bool>>();
  c.time_input = j.at("time_input").get<bool>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  return c;
}

}  // namespace

void save_bundle(const NetworkBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_bundle: cannot open " + path);
  std::ostringstream header;
  header << "FBSDECO-CKPT v1\n";
  std::vector<const Tensor*> payload;
  for (const auto& e : bundle.entries) {
    header << "net " << e.role << " " << config_to_json(e.config).dump() << "\n";
    auto tensors = const_cast<NetworkBundle::Entry&>(e).params.all_tensors();
    for (const auto& nt : tensors) {
      header << "tensor " << e.role << " " << nt.name << " "
             << nt.tensor->rank();
      for (std::size_t d : nt.tensor->shape()) header << " " << d;
      header << "\n";
      payload.push_back(nt.tensor);
    }
  }
  header << "data\n";
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const Tensor* t : payload) {
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(double)));
  }
  if (!out) throw FormatError("save_bundle: short write to " + path);
}

NetworkBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_bundle: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "FBSDECO-CKPT v1")
    throw FormatError("load_bundle: bad magic in " + path);

  NetworkBundle bundle;
  struct Slot {
    std::string role, name;
    std::vector<std::size_t> shape;
  };
  std::vector<Slot> slots;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "net") {
      std::string role;
      ls >> role;
      std::string rest;
      std::getline(ls, rest);
      NetworkBundle::Entry e;
      e.role = role;
      try {
        e.config = config_from_json(json::parse(rest));
      } catch (const json::exception&) {
        throw FormatError("load_bundle: bad config for net '" + role + "'");
      }
      e.params = init_params(e.config, 0);
      bundle.entries.push_back(std::move(e));
    } else if (kind == "tensor") {
      Slot s;
      std::size_t rank = 0;
      ls >> s.role >> s.name >> rank;
      for (std::size_t i = 0; i < rank; ++i) {
        std::size_t d = 0;
        ls >> d;
        s.shape.push_back(d);
      }
      if (!ls) throw FormatError("load_bundle: bad tensor line: " + line);
      slots.push_back(std::move(s));
    } else {
      throw FormatError("load_bundle: unexpected header line: " + line);
    }
  }
  if (line != "data") throw FormatError("load_bundle: missing data section");

  for (const Slot& s : slots) {
    NetworkBundle::Entry* e = bundle.find(s.role);
    if (!e)
      throw FormatError("load_bundle: tensor for unknown net '" + s.role + "'");
    Tensor* target = nullptr;
    for (auto& nt : e->params.all_tensors())
      if (nt.name == s.name) target = nt.tensor;
    if (!target)
      throw FormatError("load_bundle: unknown tensor '" + s.name +
                        "' in net '" + s.role + "'");
    if (target->shape() != s.shape)
      throw FormatError("load_bundle: shape mismatch for '" + s.role + "/" +
                        s.name + "'");
    in.read(reinterpret_cast<char*>(target->data()),
            static_cast<std::streamsize>(target->numel() * sizeof(double)));
    if (in.gcount() !=
        static_cast<std::streamsize>(target->numel() * sizeof(double)))
      throw FormatError("load_bundle: truncated payload at '" + s.role + "/" +
                        s.name + "'");
  }
  return bundle;
}

}  // namespace fbsdeco
