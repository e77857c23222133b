#include "ccd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ccd/common.hpp"
#include "json.hpp"

namespace ccd {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json to_json(const ModelConfig& c) {
  const auto& e = c.encoder;
  const auto& h = c.head;
  return json{{"encoder",
               {{"embed_dim", e.embed_dim},
                {"depth", e.depth},
                {"heads", e.heads},
                {"patch", e.patch},
                {"input_h", e.input_h},
                {"input_w", e.input_w},
                {"channels", e.channels},
                {"mlp_ratio", e.mlp_ratio}}},
              {"head",
               {{"seg_channels", h.seg_channels},
                {"proj_hidden", h.proj_hidden},
                {"proj_bottleneck", h.proj_bottleneck},
                {"out_dim", h.out_dim}}}};
}

int get_int(const json& j, const std::string& path, const std::string& key) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_number_integer()) {
    throw ValidationError("checkpoint field " + path + "." + key + " missing or not an integer");
  }
  return j.at(key).get<int>();
}

ModelConfig from_json(const json& j) {
  if (!j.is_object() || !j.contains("encoder") || !j.contains("head")) {
    throw ValidationError("checkpoint field cfg missing or malformed");
  }
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.encoder.embed_dim = get_int(e, "cfg.encoder", "embed_dim");
  c.encoder.depth = get_int(e, "cfg.encoder", "depth");
  c.encoder.heads = get_int(e, "cfg.encoder", "heads");
  c.encoder.patch = get_int(e, "cfg.encoder", "patch");
  c.encoder.input_h = get_int(e, "cfg.encoder", "input_h");
  c.encoder.input_w = get_int(e, "cfg.encoder", "input_w");
  c.encoder.channels = get_int(e, "cfg.encoder", "channels");
  c.encoder.mlp_ratio = get_int(e, "cfg.encoder", "mlp_ratio");
  const auto& h = j.at("head");
  c.head.seg_channels = get_int(h, "cfg.head", "seg_channels");
  c.head.proj_hidden = get_int(h, "cfg.head", "proj_hidden");
  c.head.proj_bottleneck = get_int(h, "cfg.head", "proj_bottleneck");
  c.head.out_dim = get_int(h, "cfg.head", "out_dim");
  try {
    c.validate();
  } catch (const ValidationError& err) {
    throw ValidationError(std::string("checkpoint field cfg invalid: ") + err.what());
  }
  return c;
}

const std::string kTeacherPrefix = "teacher.";
const std::string kCenterName = "state.center";

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return to_json(cfg).dump(); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json tensors = json::array();
  std::vector<std::pair<const float*, std::size_t>> blobs;
  auto add = [&](const std::string& name, const std::vector<int>& shape, const auto& v) {
    tensors.push_back({{"name", name}, {"shape", shape}});
    blobs.emplace_back(v.data(), v.size());
  };
  for (std::size_t i = 0; i < ckpt.student.size(); ++i) {
    add(ckpt.student.spec(i).name, ckpt.student.spec(i).shape, ckpt.student.values(i));
  }
  if (ckpt.teacher) {
    for (std::size_t i = 0; i < ckpt.teacher->size(); ++i) {
      add(kTeacherPrefix + ckpt.teacher->spec(i).name, ckpt.teacher->spec(i).shape, ckpt.teacher->values(i));
    }
  }
  if (!ckpt.center.empty()) add(kCenterName, {static_cast<int>(ckpt.center.size())}, ckpt.center);

  const json header{{"format_version", kCheckpointVersion},
                    {"cfg", to_json(ckpt.cfg)},
                    {"run_config", ckpt.run_config},
                    {"step", ckpt.step},
                    {"tensors", tensors}};
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("cannot write checkpoint " + path.string());
  os << header.dump() << '\n';
  for (const auto& [ptr, n] : blobs) {
    os.write(reinterpret_cast<const char*>(ptr), static_cast<std::streamsize>(n * sizeof(float)));
  }
  os.flush();
  if (!os) throw RuntimeError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("checkpoint header missing in " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception&) {
    throw ValidationError("checkpoint header is not valid JSON in " + path.string());
  }
  if (!header.is_object() || !header.contains("format_version") || !header.at("format_version").is_number_integer()) {
    throw ValidationError("checkpoint field format_version missing");
  }
  if (header.at("format_version").get<int>() != kCheckpointVersion) {
    throw ValidationError("checkpoint field format_version: unsupported version " +
                          header.at("format_version").dump());
  }
  if (!header.contains("cfg")) throw ValidationError("checkpoint field cfg missing");
  Checkpoint ck;
  ck.cfg = from_json(header.at("cfg"));
  if (header.contains("run_config") && header.at("run_config").is_string()) {
    ck.run_config = header.at("run_config").get<std::string>();
  }
  if (header.contains("step") && header.at("step").is_number_integer()) ck.step = header.at("step").get<long>();
  if (!header.contains("tensors") || !header.at("tensors").is_array()) {
    throw ValidationError("checkpoint field tensors missing");
  }

  const ParamStore<float> layout = build_layout(ck.cfg);
  ck.student = layout;
  ParamStore<float> teacher = make_teacher(layout);
  std::vector<bool> seen_student(layout.size(), false), seen_teacher(teacher.size(), false);
  bool any_teacher = false;

  for (const auto& t : header.at("tensors")) {
    if (!t.contains("name") || !t.at("name").is_string() || !t.contains("shape") || !t.at("shape").is_array()) {
      throw ValidationError("checkpoint field tensors[] entry malformed");
    }
    const std::string name = t.at("name").get<std::string>();
    std::vector<int> shape;
    for (const auto& d : t.at("shape")) {
      if (!d.is_number_integer() || d.get<long>() < 0) throw ValidationError("checkpoint field shape of " + name);
      shape.push_back(d.get<int>());
    }
    std::size_t numel = 1;
    for (int d : shape) numel *= static_cast<std::size_t>(d);
    std::vector<float> values(numel);
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(numel * sizeof(float)));
    if (static_cast<std::size_t>(is.gcount()) != numel * sizeof(float)) {
      throw ValidationError("checkpoint data truncated at tensor " + name);
    }

    ParamStore<float>* dst = &ck.student;
    std::vector<bool>* seen = &seen_student;
    std::string local = name;
    if (name == kCenterName) {
      if (shape.size() != 1) throw ValidationError("checkpoint field shape of " + name);
      ck.center = std::move(values);
      continue;
    }
    if (name.rfind(kTeacherPrefix, 0) == 0) {
      local = name.substr(kTeacherPrefix.size());
      dst = &teacher;
      seen = &seen_teacher;
      any_teacher = true;
    }
    const auto idx = dst->find(local);
    if (!idx) throw ValidationError("checkpoint has unexpected tensor " + name);
    if (dst->spec(*idx).shape != shape) throw ValidationError("checkpoint shape mismatch for tensor " + name);
    dst->values(*idx).assign(values.begin(), values.end());
    (*seen)[*idx] = true;
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint has trailing data after tensors");
  for (std::size_t i = 0; i < seen_student.size(); ++i) {
    if (!seen_student[i]) throw ValidationError("checkpoint missing tensor " + layout.spec(i).name);
  }
  if (any_teacher) {
    for (std::size_t i = 0; i < seen_teacher.size(); ++i) {
      if (!seen_teacher[i]) throw ValidationError("checkpoint missing tensor teacher." + teacher.spec(i).name);
    }
    ck.teacher = std::move(teacher);
  }
  if (!ck.center.empty() && static_cast<int>(ck.center.size()) != ck.cfg.head.out_dim) {
    throw ValidationError("checkpoint field state.center has the wrong length");
  }
  return ck;
}

}  // namespace ccd
