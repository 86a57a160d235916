#include "pad/checkpoint.hpp"

#include "pad/config.hpp"
#include "pad/eval.hpp"
#include "pad/io.hpp"
#include "pad/lifelong.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace pad {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

namespace {

constexpr char kMagic[8] = {'P', 'A', 'D', 'C', 'K', 'P', 'T', '\n'};

using nlohmann::json;

void add_params(Checkpoint& c, const ParamList& params, const std::string& prefix = "") {
  for (const auto& p : params) c.blobs.push_back({prefix + p.name, p.param->trainable, p.param->value});
}

void read_params(const Checkpoint& c, const ParamList& params, const std::string& prefix = "") {
  for (const auto& p : params) {
    const Blob* b = c.find(prefix + p.name);
    if (!b) throw CheckpointError("checkpoint: missing blob " + prefix + p.name);
    if (b->value.rows() != p.param->value.rows() || b->value.cols() != p.param->value.cols())
      throw CheckpointError("checkpoint: shape mismatch for " + prefix + p.name);
    p.param->value = b->value;
    p.param->trainable = b->trainable;
  }
}

json ta_structure(const TAPrompt& ta) {
  json rows = json::array();
  for (int id : ta.identities()) rows.push_back({id, ta.domain_of(id)});
  return rows;
}

void rebuild_ta(TAPrompt& ta, const json& rows) {
  for (const auto& r : rows) {
    const int id = r.at(0).get<int>();
    ta.register_identities(std::span<const int>(&id, 1), r.at(1).get<int>());
  }
}

json pool_structure(const VAPromptPool& pool) {
  json slots = json::array();
  for (const auto& layer : pool.layers) {
    json l = json::array();
    for (const auto& s : layer.slots) l.push_back({s.initialized, s.trainable});
    slots.push_back(l);
  }
  return {{"current_domain", pool.current_domain}, {"slots", slots}};
}

void rebuild_pool(VAPromptPool& pool, const json& j) {
  pool.current_domain = j.at("current_domain").get<int>();
  const auto& slots = j.at("slots");
  if (slots.size() != pool.layers.size()) throw CheckpointError("checkpoint: prompt pool depth mismatch");
  for (size_t l = 0; l < pool.layers.size(); ++l) {
    if (slots[l].size() != pool.layers[l].slots.size()) throw CheckpointError("checkpoint: prompt pool size mismatch");
    for (size_t s = 0; s < slots[l].size(); ++s) {
      pool.layers[l].slots[s].initialized = slots[l][s].at(0).get<bool>();
      pool.layers[l].slots[s].trainable = slots[l][s].at(1).get<bool>();
    }
  }
}

json adam_structure(const Adam& opt, Checkpoint& c, const std::string& prefix) {
  json steps = json::object();
  for (const auto& [name, st] : opt.state()) {
    steps[name] = st.steps;
    c.blobs.push_back({prefix + name + ".m", false, st.m});
    c.blobs.push_back({prefix + name + ".v", false, st.v});
  }
  return steps;
}

void rebuild_adam(Adam& opt, const Checkpoint& c, const json& steps, const std::string& prefix) {
  for (const auto& [name, n] : steps.items()) {
    const Blob* m = c.find(prefix + name + ".m");
    const Blob* v = c.find(prefix + name + ".v");
    if (!m || !v) throw CheckpointError("checkpoint: missing optimizer moments for " + name);
    opt.state()[name] = AdamState{m->value, v->value, n.get<int64_t>()};
  }
}

std::string hash_text(uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace

const Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.name == name) return &b;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json header = ckpt.header;
  json index = json::array();
  uint64_t offset = 0;
  for (const auto& b : ckpt.blobs) {
    index.push_back({{"name", b.name},
                     {"dtype", "f64"},
                     {"shape", {b.value.rows(), b.value.cols()}},
                     {"trainable", b.trainable},
                     {"offset", offset}});
    offset += static_cast<uint64_t>(b.value.size()) * sizeof(double);
  }
  header["blobs"] = index;
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  for (const auto& b : ckpt.blobs)
    out.append(reinterpret_cast<const char*>(b.value.data()), static_cast<size_t>(b.value.size()) * sizeof(double));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("checkpoint: bad magic");
  uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const size_t start = sizeof(kMagic) + sizeof(len);
  if (len > bytes.size() - start) throw CheckpointError("checkpoint: truncated header");
  Checkpoint c;
  try {
    c.header = json::parse(bytes.substr(start, len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  if (c.header.value("version", -1) != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + c.header.value("version", json(-1)).dump());
  const size_t data = start + len;
  for (const auto& entry : c.header.at("blobs")) {
    Blob b;
    b.name = entry.at("name").get<std::string>();
    b.trainable = entry.at("trainable").get<bool>();
    if (entry.at("dtype") != "f64") throw CheckpointError("checkpoint: unsupported dtype for " + b.name);
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<uint64_t>();
    const size_t n = static_cast<size_t>(rows * cols) * sizeof(double);
    if (data + offset + n > bytes.size()) throw CheckpointError("checkpoint: truncated blob " + b.name);
    b.value.resize(rows, cols);
    std::memcpy(b.value.data(), bytes.data() + data + offset, n);
    c.blobs.push_back(std::move(b));
  }
  c.header.erase("blobs");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint: " + path.string() + " not found");
  return deserialize_checkpoint(read_file(path));
}

Checkpoint capture_checkpoint(const RunState& cs, const MetricsReport& metrics) {
  // Collecting needs mutable access to hand out parameter pointers; nothing is written.
  auto& s = const_cast<RunState&>(cs);
  ModelState& m = s.model;
  Checkpoint c;
  c.header["version"] = kCheckpointVersion;
  c.header["config_hash"] = hash_text(config_hash(m.cfg));
  c.header["config"] = to_json(m.cfg);
  c.header["domain"] = m.domain;
  c.header["metrics_csv"] = metrics_csv(metrics);
  c.header["diagnostics_csv"] = diagnostics_csv(metrics);
  std::ostringstream rng;
  rng << s.rng;
  c.header["rng"] = rng.str();
  c.header["ta"] = ta_structure(m.ta);
  c.header["pool"] = pool_structure(m.pool);
  json heads = json::array();
  for (const auto& h : m.heads) heads.push_back(h.weight.value.cols());
  c.header["heads"] = heads;

  ParamList all = m.all_params();
  add_params(c, all);

  c.header["teacher"] = {{"alpha", s.teacher.alpha},
                         {"ready", s.teacher.ready},
                         {"bank_ids", s.teacher.bank_ids},
                         {"ta", ta_structure(s.teacher.ta)},
                         {"pool", pool_structure(s.teacher.pool)}};
  ParamList teacher;
  s.teacher.image.collect(teacher);
  s.teacher.pool.collect(teacher);
  s.teacher.ta.collect(teacher);
  add_params(c, teacher, "teacher.");
  c.blobs.push_back({"teacher.text_bank", false, s.teacher.text_bank});

  c.header["adam"] = {{"visual", adam_structure(s.opt_visual, c, "adam.visual.")},
                      {"text", adam_structure(s.opt_text, c, "adam.text.")}};
  return c;
}

ExperimentConfig checkpoint_config(const Checkpoint& c) { return from_json(c.header.at("config")); }
int checkpoint_domain(const Checkpoint& c) { return c.header.at("domain").get<int>(); }

MetricsReport checkpoint_metrics(const Checkpoint& c) {
  return parse_metrics(c.header.at("metrics_csv").get<std::string>(), c.header.at("diagnostics_csv").get<std::string>());
}

RunState restore_run_state(const Checkpoint& c, const ExperimentConfig& cfg) {
  if (c.header.at("config_hash").get<std::string>() != hash_text(config_hash(cfg)))
    throw CheckpointError("checkpoint: config hash mismatch (checkpoint was written by a different configuration)");
  RunState s(cfg);
  ModelState& m = s.model;
  m.domain = c.header.at("domain").get<int>();
  rebuild_ta(m.ta, c.header.at("ta"));
  rebuild_pool(m.pool, c.header.at("pool"));
  std::mt19937_64 unused;
  for (const auto& cols : c.header.at("heads"))
    m.heads.emplace_back(cfg.proj_dim, cols.get<int>(), 1.0, true, unused);
  read_params(c, m.all_params());

  const json& t = c.header.at("teacher");
  s.teacher.alpha = t.at("alpha").get<double>();
  s.teacher.ready = t.at("ready").get<bool>();
  s.teacher.bank_ids = t.at("bank_ids").get<std::vector<int>>();
  s.teacher.image = m.image;
  s.teacher.pool = m.pool;
  s.teacher.ta = TAPrompt(cfg.ta_tokens, cfg.embed_dim, 0);
  rebuild_ta(s.teacher.ta, t.at("ta"));
  rebuild_pool(s.teacher.pool, t.at("pool"));
  ParamList teacher;
  s.teacher.image.collect(teacher);
  s.teacher.pool.collect(teacher);
  s.teacher.ta.collect(teacher);
  read_params(c, teacher, "teacher.");
  if (const Blob* b = c.find("teacher.text_bank")) s.teacher.text_bank = b->value;

  rebuild_adam(s.opt_visual, c, c.header.at("adam").at("visual"), "adam.visual.");
  rebuild_adam(s.opt_text, c, c.header.at("adam").at("text"), "adam.text.");
  std::istringstream rng(c.header.at("rng").get<std::string>());
  rng >> s.rng;
  return s;
}

}  // namespace pad
