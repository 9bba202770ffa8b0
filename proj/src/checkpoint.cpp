#include "chronoformer/checkpoint.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "chronoformer/error.hpp"

namespace chronoformer {

namespace {

constexpr const char* kMagic = "chronoformer-ckpt v1";

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0' || errno != 0)
    throw ConfigError(key + " expects an integer, got '" + value + "'");
  return static_cast<int>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError(key + " expects a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError(key + " expects 0/1 or true/false, got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0' || errno != 0)
    throw ConfigError(key + " expects an unsigned integer, got '" + value +
                      "'");
  return v;
}

[[noreturn]] void bad_line(int lineno, const std::string& what) {
  throw ParseError("line " + std::to_string(lineno) + ": " + what);
}

}  // namespace

void write_model_config(const ModelConfig& cfg, std::ostream& os) {
  os << "n_encoders = " << cfg.n_encoders << '\n'
     << "n_decoders = " << cfg.n_decoders << '\n'
     << "d_model = " << cfg.block.d_model << '\n'
     << "heads = " << cfg.block.heads << '\n'
     << "head_size = " << cfg.block.head_size << '\n'
     << "d_ff = " << cfg.block.d_ff << '\n'
     << "norm_placement = " << to_string(cfg.block.norm_placement) << '\n'
     << "attention_variant = " << to_string(cfg.block.attention_variant)
     << '\n'
     << "probsparse_u = " << cfg.block.probsparse_u << '\n'
     << "probsparse_c = " << g17(cfg.block.probsparse_c) << '\n'
     << "conv_kernel = " << cfg.block.conv_kernel << '\n'
     << "logsparse_kind = " << to_string(cfg.block.logsparse.kind) << '\n'
     << "logsparse_window = " << cfg.block.logsparse.local_window << '\n'
     << "logsparse_range = " << cfg.block.logsparse.restart_range << '\n'
     << "distilling = " << (cfg.distilling ? 1 : 0) << '\n'
     << "replica = " << (cfg.replica ? 1 : 0) << '\n'
     << "head = " << to_string(cfg.head) << '\n'
     << "classes = " << cfg.classes << '\n'
     << "dense_interp = " << (cfg.dense_interp ? 1 : 0) << '\n'
     << "interp_m = " << cfg.interp_m << '\n'
     << "input_width = " << cfg.input_width << '\n'
     << "output_width = " << cfg.output_width << '\n'
     << "window = " << cfg.window << '\n'
     << "horizon = " << cfg.horizon << '\n'
     << "input_kernel = " << cfg.input_kernel << '\n'
     << "pe_base = " << g17(cfg.pe_base) << '\n'
     << "pe_variant = " << to_string(cfg.pe_variant) << '\n'
     << "use_stamps = " << (cfg.use_stamps ? 1 : 0) << '\n'
     << "seed = " << cfg.seed << '\n';
}

bool apply_model_config_key(ModelConfig& cfg, const std::string& key,
                            const std::string& value) {
  if (key == "n_encoders") cfg.n_encoders = parse_int(key, value);
  else if (key == "n_decoders") cfg.n_decoders = parse_int(key, value);
  else if (key == "d_model") cfg.block.d_model = parse_int(key, value);
  else if (key == "heads") cfg.block.heads = parse_int(key, value);
  else if (key == "head_size") cfg.block.head_size = parse_int(key, value);
  else if (key == "d_ff") cfg.block.d_ff = parse_int(key, value);
  else if (key == "norm_placement")
    cfg.block.norm_placement = norm_placement_from_string(value);
  else if (key == "attention_variant")
    cfg.block.attention_variant = attention_variant_from_string(value);
  else if (key == "probsparse_u")
    cfg.block.probsparse_u = parse_int(key, value);
  else if (key == "probsparse_c")
    cfg.block.probsparse_c = parse_double(key, value);
  else if (key == "conv_kernel") cfg.block.conv_kernel = parse_int(key, value);
  else if (key == "logsparse_kind")
    cfg.block.logsparse.kind = mask_kind_from_string(value);
  else if (key == "logsparse_window")
    cfg.block.logsparse.local_window = parse_int(key, value);
  else if (key == "logsparse_range")
    cfg.block.logsparse.restart_range = parse_int(key, value);
  else if (key == "distilling") cfg.distilling = parse_bool(key, value);
  else if (key == "replica") cfg.replica = parse_bool(key, value);
  else if (key == "head") cfg.head = head_kind_from_string(value);
  else if (key == "classes") cfg.classes = parse_int(key, value);
  else if (key == "dense_interp") cfg.dense_interp = parse_bool(key, value);
  else if (key == "interp_m") cfg.interp_m = parse_int(key, value);
  else if (key == "input_width") cfg.input_width = parse_int(key, value);
  else if (key == "output_width") cfg.output_width = parse_int(key, value);
  else if (key == "window") cfg.window = parse_int(key, value);
  else if (key == "horizon") cfg.horizon = parse_int(key, value);
  else if (key == "input_kernel") cfg.input_kernel = parse_int(key, value);
  else if (key == "pe_base") cfg.pe_base = parse_double(key, value);
  else if (key == "pe_variant") cfg.pe_variant = pe_variant_from_string(value);
  else if (key == "use_stamps") cfg.use_stamps = parse_bool(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else return false;
  return true;
}

const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys = {
      "n_encoders",   "n_decoders",      "d_model",
      "heads",        "head_size",       "d_ff",
      "norm_placement", "attention_variant", "probsparse_u",
      "probsparse_c", "conv_kernel",     "logsparse_kind",
      "logsparse_window", "logsparse_range", "distilling",
      "replica",      "head",            "classes",
      "dense_interp", "interp_m",        "input_width",
      "output_width", "window",          "horizon",
      "input_kernel", "pe_base",         "pe_variant",
      "use_stamps",   "seed"};
  return keys;
}

void save_checkpoint(const Model& model, const NormStats& norm,
                     std::ostream& os) {
  os << kMagic << '\n' << "[config]\n";
  write_model_config(model.config(), os);
  os << "[norm]\n";
  if (norm.empty()) {
    os << "none\n";
  } else {
    os << "mu";
    for (double v : norm.mu) os << ' ' << g17(v);
    os << "\nsigma";
    for (double v : norm.sigma) os << ' ' << g17(v);
    os << '\n';
  }
  os << "[tensors] " << model.params().size() << '\n';
  for (const NamedParam& p : model.params()) {
    os << p.name;
    for (int d : p.tensor.shape()) os << ' ' << d;
    os << " :";
    for (double v : p.tensor.values()) os << ' ' << g17(v);
    os << '\n';
  }
}

void save_checkpoint_file(const Model& model, const NormStats& norm,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  save_checkpoint(model, norm, f);
  if (!f) throw DataError("failed writing " + path);
}

Checkpoint load_checkpoint(std::istream& is) {
  std::string line;
  int lineno = 0;
  auto next = [&](const char* what) {
    if (!std::getline(is, line)) bad_line(lineno + 1, std::string("missing ") + what);
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };

  next("checkpoint magic");
  if (line != kMagic)
    bad_line(lineno, "not a checkpoint (expected '" + std::string(kMagic) +
                         "')");
  next("[config] section");
  if (line != "[config]") bad_line(lineno, "expected [config]");

  Checkpoint ck;
  for (;;) {
    next("configuration or [norm]");
    if (line == "[norm]") break;
    const std::size_t eq = line.find(" = ");
    if (eq == std::string::npos) bad_line(lineno, "expected 'key = value'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (!apply_model_config_key(ck.config, key, value))
      bad_line(lineno, "unknown configuration key '" + key + "'");
  }

  auto parse_vec = [&](const std::string& name) {
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head != name) bad_line(lineno, "expected '" + name + "' values");
    std::vector<double> vs;
    double v;
    while (ss >> v) vs.push_back(v);
    return vs;
  };
  next("normalization");
  if (line != "none") {
    ck.norm.mu = parse_vec("mu");
    next("sigma values");
    ck.norm.sigma = parse_vec("sigma");
    if (ck.norm.mu.size() != ck.norm.sigma.size() || ck.norm.mu.empty())
      bad_line(lineno, "mu and sigma lengths disagree");
  }

  next("[tensors] section");
  std::istringstream hs(line);
  std::string tag;
  std::size_t count = 0;
  if (!(hs >> tag >> count) || tag != "[tensors]")
    bad_line(lineno, "expected '[tensors] <count>'");

  for (std::size_t i = 0; i < count; ++i) {
    next("tensor line");
    std::istringstream ss(line);
    NamedParam p;
    if (!(ss >> p.name)) bad_line(lineno, "expected a tensor name");
    std::vector<int> shape;
    std::string tok;
    while (ss >> tok && tok != ":") {
      try {
        shape.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        bad_line(lineno, "bad shape entry '" + tok + "'");
      }
    }
    if (tok != ":") bad_line(lineno, "missing ':' after the shape");
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    Tensor t(shape);
    if (static_cast<int>(vals.size()) != t.numel())
      bad_line(lineno, p.name + " carries " + std::to_string(vals.size()) +
                           " values for shape " + shape_str(shape));
    t.values() = std::move(vals);
    p.tensor = t;
    ck.tensors.push_back(std::move(p));
  }
  return ck;
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  return load_checkpoint(f);
}

Model restore_model(const Checkpoint& ck) {
  Model model(ck.config);
  if (ck.tensors.size() != model.params().size())
    throw DataError("checkpoint stores " + std::to_string(ck.tensors.size()) +
                    " tensors but the configuration builds " +
                    std::to_string(model.params().size()));
  for (const NamedParam& stored : ck.tensors) {
    Tensor* live = model.find_param(stored.name);
    if (live == nullptr)
      throw DataError("checkpoint tensor '" + stored.name +
                      "' does not exist in the configured model");
    if (live->shape() != stored.tensor.shape())
      throw DataError("checkpoint tensor '" + stored.name + "' has shape " +
                      shape_str(stored.tensor.shape()) +
                      " but the model expects " + shape_str(live->shape()));
    live->values() = stored.tensor.values();
  }
  return model;
}

}  // namespace chronoformer
