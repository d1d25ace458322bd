// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/runconfig.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace msdetr {

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"crack", "corrosion", "decarburization", "scratch",
                                              "pit"};
  return names;
}

void RunConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& msg) { throw ConfigError("run config: " + msg); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (lr <= 0) fail("lr must be positive");
  if (images < 3) fail("images must be >= 3");
  if (image_size < 16) fail("image_size must be >= 16");
  const int64_t div = int64_t(1) << (model.levels + 1);
  if (image_size % div != 0)
    fail("image_size (" + std::to_string(image_size) + ") must be divisible by 2^(levels+1) = " +
         std::to_string(div));
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    fail("split ratios must sum to 1");
  if (min_instances < 1 || max_instances < min_instances || max_instances > 8)
    fail("instance counts must satisfy 1 <= min <= max <= 8");
  if (model.classes != static_cast<int64_t>(class_names().size()))
    fail("classes must equal the " + std::to_string(class_names().size()) +
         " synthetic categories");
}

int64_t RunConfig::train_count() const {
  return static_cast<int64_t>(std::llround(train_ratio * static_cast<double>(images)));
}
int64_t RunConfig::val_count() const {
  return static_cast<int64_t>(std::llround(val_ratio * static_cast<double>(images)));
}
int64_t RunConfig::test_count() const { return images - train_count() - val_count(); }

namespace {

std::vector<int64_t> parse_int_list(const std::string& s) {
  std::vector<int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
  return out;
}

std::string join(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: expected boolean, got '" + s + "'");
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig rc;
  std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"seed", [&](const std::string& v) { rc.seed = std::stoull(v); }},
      {"epochs", [&](const std::string& v) { rc.epochs = std::stoll(v); }},
      {"batch_size", [&](const std::string& v) { rc.batch_size = std::stoll(v); }},
      {"lr", [&](const std::string& v) { rc.lr = std::stod(v); }},
      {"weight_decay", [&](const std::string& v) { rc.weight_decay = std::stod(v); }},
      {"warmup_steps", [&](const std::string& v) { rc.warmup_steps = std::stoll(v); }},
      {"images", [&](const std::string& v) { rc.images = std::stoll(v); }},
      {"image_size", [&](const std::string& v) { rc.image_size = std::stoll(v); }},
      {"train_ratio", [&](const std::string& v) { rc.train_ratio = std::stod(v); }},
      {"val_ratio", [&](const std::string& v) { rc.val_ratio = std::stod(v); }},
      {"test_ratio", [&](const std::string& v) { rc.test_ratio = std::stod(v); }},
      {"hflip", [&](const std::string& v) { rc.hflip = parse_bool(v); }},
      {"scale_jitter", [&](const std::string& v) { rc.scale_jitter = parse_bool(v); }},
      {"min_instances", [&](const std::string& v) { rc.min_instances = std::stoll(v); }},
      {"max_instances", [&](const std::string& v) { rc.max_instances = std::stoll(v); }},
      {"stop_at_map50", [&](const std::string& v) { rc.stop_at_map50 = std::stod(v); }},
      {"levels", [&](const std::string& v) { rc.model.levels = std::stoll(v); }},
      {"d_model", [&](const std::string& v) { rc.model.d_model = std::stoll(v); }},
      {"encoder_layers", [&](const std::string& v) { rc.model.encoder_layers = std::stoll(v); }},
      {"decoder_layers", [&](const std::string& v) { rc.model.decoder_layers = std::stoll(v); }},
      {"heads", [&](const std::string& v) { rc.model.heads = std::stoll(v); }},
      {"points", [&](const std::string& v) { rc.model.points = std::stoll(v); }},
      {"queries", [&](const std::string& v) { rc.model.queries = std::stoll(v); }},
      {"classes", [&](const std::string& v) { rc.model.classes = std::stoll(v); }},
      {"rep", [&](const std::string& v) { rc.model.rep = parse_bool(v); }},
      {"da", [&](const std::string& v) { rc.model.da = parse_bool(v); }},
      {"csff", [&](const std::string& v) { rc.model.csff = parse_bool(v); }},
      {"backbone_widths",
       [&](const std::string& v) { rc.model.backbone_widths = parse_int_list(v); }},
      {"backbone_blocks",
       [&](const std::string& v) { rc.model.backbone_blocks = parse_int_list(v); }},
      {"ffn_mult", [&](const std::string& v) { rc.model.ffn_mult = std::stoll(v); }},
      {"vov_depth", [&](const std::string& v) { rc.model.vov_depth = std::stoll(v); }},
      {"aux_loss", [&](const std::string& v) { rc.model.aux_loss = parse_bool(v); }},
  };

  std::istringstream in(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto strip = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": bad value '" + value +
                        "' for key '" + key + "'");
    }
  }
  rc.model.init_seed = rc.seed;
  return rc;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "seed = " << seed << "\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "lr = " << lr << "\n";
  os << "weight_decay = " << weight_decay << "\n";
  os << "warmup_steps = " << warmup_steps << "\n";
  os << "images = " << images << "\n";
  os << "image_size = " << image_size << "\n";
  os << "train_ratio = " << train_ratio << "\n";
  os << "val_ratio = " << val_ratio << "\n";
  os << "test_ratio = " << test_ratio << "\n";
  os << "hflip = " << (hflip ? "true" : "false") << "\n";
  os << "scale_jitter = " << (scale_jitter ? "true" : "false") << "\n";
  os << "min_instances = " << min_instances << "\n";
  os << "max_instances = " << max_instances << "\n";
  os << "stop_at_map50 = " << stop_at_map50 << "\n";
  os << "levels = " << model.levels << "\n";
  os << "d_model = " << model.d_model << "\n";
  os << "encoder_layers = " << model.encoder_layers << "\n";
  os << "decoder_layers = " << model.decoder_layers << "\n";
  os << "heads = " << model.heads << "\n";
  os << "points = " << model.points << "\n";
  os << "queries = " << model.queries << "\n";
  os << "classes = " << model.classes << "\n";
  os << "rep = " << (model.rep ? "true" : "false") << "\n";
  os << "da = " << (model.da ? "true" : "false") << "\n";
  os << "csff = " << (model.csff ? "true" : "false") << "\n";
  os << "backbone_widths = " << join(model.backbone_widths) << "\n";
  os << "backbone_blocks = " << join(model.backbone_blocks) << "\n";
  os << "ffn_mult = " << model.ffn_mult << "\n";
  os << "vov_depth = " << model.vov_depth << "\n";
  os << "aux_loss = " << (model.aux_loss ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace msdetr
