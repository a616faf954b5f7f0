// SPDX-License-Identifier: Apache-2.0
#include <map>
#include <sstream>

#include "pmtmae/binio.hpp"
#include "pmtmae/train.hpp"

namespace pmt {

namespace {

void put_table(binio::Writer& w, const std::vector<NamedArray>& table) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  for (const auto& e : table) {
    require(e.name.size() <= 0xffff, ErrorKind::Contract, "checkpoint: parameter name too long");
    require(e.shape.size() <= 0xff, ErrorKind::Contract, "checkpoint: rank too large for " + e.name);
    require(nd::numel(e.shape) == e.data.size(), ErrorKind::Contract, "checkpoint: size mismatch for " + e.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.floats(e.data.data(), e.data.size());
  }
}

std::vector<NamedArray> get_table(binio::Reader& r) {
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedArray> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray e;
    const auto len = r.get<std::uint16_t>();
    e.name = std::string(r.bytes(len));
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint32_t>());
    e.data.resize(nd::numel(e.shape));
    r.floats(e.data.data(), e.data.size());
    table.push_back(std::move(e));
  }
  return table;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  binio::Writer w;
  w.magic("PMTC");
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = ck.config.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.put<std::uint32_t>(ck.epoch);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.rng_state.size()));
  w.bytes(ck.rng_state);
  put_table(w, ck.params);
  put_table(w, ck.moments);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  r.expect_magic("PMTC");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::Format, what + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto cfg_len = r.get<std::uint32_t>();
  const auto cfg_text = r.bytes(cfg_len);
  try {
    ck.config = nlohmann::ordered_json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, what + ": config block is not valid JSON: " + e.what());
  }
  ck.epoch = r.get<std::uint32_t>();
  const auto rng_len = r.get<std::uint32_t>();
  ck.rng_state = std::string(r.bytes(rng_len));
  ck.params = get_table(r);
  ck.moments = get_table(r);
  if (!r.done()) fail(ErrorKind::Format, what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) { binio::write_file(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path), path); }

Checkpoint capture(const Model<float>& model, const TrainState* state, const nlohmann::ordered_json& config) {
  Checkpoint ck;
  ck.config = config.is_null() ? nlohmann::ordered_json::object() : config;
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = store.tensors()[i];
    ck.params.push_back({store.specs()[i].name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  if (state != nullptr) {
    ck.epoch = static_cast<std::uint32_t>(state->epoch);
    std::ostringstream ss;
    ss << state->rng;
    ck.rng_state = ss.str();
    ck.config["optimizer.step"] = state->opt.steps();
    const auto& moments = state->opt.state();
    for (std::size_t i = 0; i < moments.size(); ++i) {
      if (moments[i].m.empty()) continue;
      const auto& spec = store.specs()[i];
      ck.moments.push_back({spec.name + "#m", spec.shape, moments[i].m});
      ck.moments.push_back({spec.name + "#v", spec.shape, moments[i].v});
    }
  }
  return ck;
}

void restore_params(Model<float>& model, const Checkpoint& ck) {
  const auto& store = model.params();
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& e : ck.params) by_name[e.name] = &e;
  for (const auto& e : ck.params) {
    if (!store.contains(e.name))
      fail(ErrorKind::Dimension, "checkpoint parameter \"" + e.name + "\" does not exist in this model configuration");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& spec = store.specs()[i];
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) fail(ErrorKind::Dimension, "checkpoint lacks parameter \"" + spec.name + "\"");
    if (it->second->shape != spec.shape) {
      fail(ErrorKind::Dimension, "checkpoint parameter \"" + spec.name + "\" has shape " +
                                     nd::shape_str(it->second->shape) + ", model expects " + nd::shape_str(spec.shape));
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto t = store.tensors()[i];
    const auto& src = by_name.at(store.specs()[i].name)->data;
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

void restore_state(TrainState& state, const Checkpoint& ck) {
  state.epoch = static_cast<int>(ck.epoch);
  if (!ck.rng_state.empty()) {
    std::istringstream ss(ck.rng_state);
    ss >> state.rng;
    if (!ss) fail(ErrorKind::Format, "checkpoint: malformed RNG state");
  }
  if (auto it = ck.config.find("optimizer.step"); it != ck.config.end()) state.opt.set_steps(it->get<std::uint64_t>());
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& e : ck.moments) by_name[e.name] = &e;
  auto& moments = state.opt.state();
  // Parameter order in the optimizer equals the parameter table order.
  for (std::size_t i = 0; i < moments.size(); ++i) {
    const auto& pname = ck.params.at(i).name;
    auto m = by_name.find(pname + "#m");
    auto v = by_name.find(pname + "#v");
    if (m == by_name.end() || v == by_name.end()) {
      moments[i] = {};
      continue;
    }
    require(m->second->data.size() == ck.params[i].data.size() && v->second->data.size() == ck.params[i].data.size(),
            ErrorKind::Dimension, "checkpoint: optimizer moment size mismatch for \"" + pname + "\"");
    moments[i].m = m->second->data;
    moments[i].v = v->second->data;
  }
}

}  // namespace pmt
