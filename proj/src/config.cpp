#include "rrlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace rrlab {

ConfigError::ConfigError(const std::string& source, std::size_t line, const std::string& message)
    : std::runtime_error(line ? source + ":" + std::to_string(line) + ": " + message : source + ": " + message),
      line_(line) {}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Value parsers throw std::invalid_argument with a short reason; the caller
// attaches the line.
double to_double(const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& v, F convert) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<T>(convert(item)));
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(v);
    } else {
      out += std::to_string(v);
    }
  }
  return out;
}

struct Key {
  const char* section;
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Key>& keys() {
  using C = ExperimentConfig;
  static const std::vector<Key> table = {
      {"data", "train", [](C& c, const std::string& v) { c.train_path = v; }, [](const C& c) { return c.train_path; }},
      {"data", "test", [](C& c, const std::string& v) { c.test_path = v; }, [](const C& c) { return c.test_path; }},

      {"split", "labels_per_class", [](C& c, const std::string& v) { c.labels_per_class = to_uint(v); },
       [](const C& c) { return std::to_string(c.labels_per_class); }},
      {"split", "validation", [](C& c, const std::string& v) { c.validation = to_uint(v); },
       [](const C& c) { return std::to_string(c.validation); }},
      {"split", "unlabeled", [](C& c, const std::string& v) { c.unlabeled = to_uint(v); },
       [](const C& c) { return std::to_string(c.unlabeled); }},
      {"split", "seed",
       [](C& c, const std::string& v) { c.split_seed = v == "run" ? std::nullopt : std::optional(to_uint(v)); },
       [](const C& c) { return c.split_seed ? std::to_string(*c.split_seed) : std::string("run"); }},
      {"split", "lambda_mis",
       [](C& c, const std::string& v) { c.lambda_mis = v == "none" ? std::nullopt : std::optional(to_double(v)); },
       [](const C& c) { return c.lambda_mis ? fmt_double(*c.lambda_mis) : std::string("none"); }},
      {"split", "in_classes",
       [](C& c, const std::string& v) {
         c.in_classes = v == "all" ? std::vector<std::uint32_t>{} : to_list<std::uint32_t>(v, to_uint);
       },
       [](const C& c) { return c.in_classes.empty() ? std::string("all") : join(c.in_classes); }},

      {"preprocess", "scale", [](C& c, const std::string& v) { c.scale = to_bool(v); },
       [](const C& c) { return std::string(c.scale ? "true" : "false"); }},
      {"preprocess", "zca", [](C& c, const std::string& v) { c.zca = to_bool(v); },
       [](const C& c) { return std::string(c.zca ? "true" : "false"); }},
      {"preprocess", "zca_epsilon", [](C& c, const std::string& v) { c.zca_epsilon = to_double(v); },
       [](const C& c) { return fmt_double(c.zca_epsilon); }},

      {"augment", "max_translation",
       [](C& c, const std::string& v) { c.augmentation.max_translation = static_cast<int>(to_uint(v)); },
       [](const C& c) { return std::to_string(c.augmentation.max_translation); }},
      {"augment", "flip", [](C& c, const std::string& v) { c.augmentation.flip = to_bool(v); },
       [](const C& c) { return std::string(c.augmentation.flip ? "true" : "false"); }},
      {"augment", "rgb_shuffle", [](C& c, const std::string& v) { c.augmentation.rgb_shuffle = to_bool(v); },
       [](const C& c) { return std::string(c.augmentation.rgb_shuffle ? "true" : "false"); }},
      {"augment", "noise_sigma", [](C& c, const std::string& v) { c.augmentation.noise_sigma = to_double(v); },
       [](const C& c) { return fmt_double(c.augmentation.noise_sigma); }},

      {"model", "architecture", [](C& c, const std::string& v) { c.architecture = v; },
       [](const C& c) { return c.architecture; }},
      {"model", "final_bn", [](C& c, const std::string& v) { c.final_bn = to_bool(v); },
       [](const C& c) { return std::string(c.final_bn ? "true" : "false"); }},

      {"train", "loss", [](C& c, const std::string& v) { c.train.terms = LossTerms::parse(v); },
       [](const C& c) { return c.train.terms.name(); }},
      {"train", "epsilon", [](C& c, const std::string& v) { c.train.vat.epsilon = to_double(v); },
       [](const C& c) { return fmt_double(c.train.vat.epsilon); }},
      {"train", "xi", [](C& c, const std::string& v) { c.train.vat.xi = to_double(v); },
       [](const C& c) { return fmt_double(c.train.vat.xi); }},
      {"train", "power_iterations",
       [](C& c, const std::string& v) { c.train.vat.power_iterations = static_cast<int>(to_uint(v)); },
       [](const C& c) { return std::to_string(c.train.vat.power_iterations); }},
      {"train", "vat_precision",
       [](C& c, const std::string& v) {
         if (v != "double" && v != "float") throw std::invalid_argument("expected double or float, got '" + v + "'");
         c.train.vat_double_precision = v == "double";
       },
       [](const C& c) { return std::string(c.train.vat_double_precision ? "double" : "float"); }},
      {"train", "deterministic_targets",
       [](C& c, const std::string& v) { c.train.deterministic_targets = to_bool(v); },
       [](const C& c) { return std::string(c.train.deterministic_targets ? "true" : "false"); }},
      {"train", "rho_roi", [](C& c, const std::string& v) { c.train.rho_roi = to_double(v); },
       [](const C& c) { return fmt_double(c.train.rho_roi); }},
      {"train", "lambda", [](C& c, const std::string& v) { c.train.lambda = to_double(v); },
       [](const C& c) { return fmt_double(c.train.lambda); }},
      {"train", "lambda_aug", [](C& c, const std::string& v) { c.train.lambda_aug = to_double(v); },
       [](const C& c) { return fmt_double(c.train.lambda_aug); }},
      {"train", "block",
       [](C& c, const std::string& v) {
         if (v == "eighths") {
           c.train.block_rows = c.train.block_cols = 0;
           return;
         }
         const auto x = v.find('x');
         if (x == std::string::npos) throw std::invalid_argument("expected ROWSxCOLS or eighths, got '" + v + "'");
         c.train.block_rows = static_cast<int>(to_uint(trim(v.substr(0, x))));
         c.train.block_cols = static_cast<int>(to_uint(trim(v.substr(x + 1))));
         if (c.train.block_rows == 0 || c.train.block_cols == 0) throw std::invalid_argument("block extents must be positive");
       },
       [](const C& c) {
         return c.train.block_rows == 0 ? std::string("eighths")
                                        : std::to_string(c.train.block_rows) + "x" + std::to_string(c.train.block_cols);
       }},
      {"train", "roi_weight",
       [](C& c, const std::string& v) {
         if (v == "reliability") {
           c.train.roi_weight = RoiWeight::Reliability;
         } else if (v == "label-probability") {
           c.train.roi_weight = RoiWeight::LabelProbability;
         } else {
           throw std::invalid_argument("expected reliability or label-probability, got '" + v + "'");
         }
       },
       [](const C& c) {
         return std::string(c.train.roi_weight == RoiWeight::Reliability ? "reliability" : "label-probability");
       }},
      {"train", "m_l", [](C& c, const std::string& v) { c.train.m_l = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.m_l); }},
      {"train", "m_ul", [](C& c, const std::string& v) { c.train.m_ul = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.m_ul); }},
      {"train", "lr", [](C& c, const std::string& v) { c.train.schedule.lr = to_double(v); },
       [](const C& c) { return fmt_double(c.train.schedule.lr); }},
      {"train", "n_update", [](C& c, const std::string& v) { c.train.schedule.n_update = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.schedule.n_update); }},
      {"train", "n_decay", [](C& c, const std::string& v) { c.train.schedule.n_decay = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.schedule.n_decay); }},
      {"train", "beta1", [](C& c, const std::string& v) { c.train.schedule.beta1_phase1 = to_double(v); },
       [](const C& c) { return fmt_double(c.train.schedule.beta1_phase1); }},
      {"train", "beta1_decay", [](C& c, const std::string& v) { c.train.schedule.beta1_phase2 = to_double(v); },
       [](const C& c) { return fmt_double(c.train.schedule.beta1_phase2); }},
      {"train", "beta2", [](C& c, const std::string& v) { c.train.schedule.beta2 = to_double(v); },
       [](const C& c) { return fmt_double(c.train.schedule.beta2); }},
      {"train", "adam_eps", [](C& c, const std::string& v) { c.train.schedule.eps = to_double(v); },
       [](const C& c) { return fmt_double(c.train.schedule.eps); }},
      {"train", "log_every", [](C& c, const std::string& v) { c.train.log_every = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.log_every); }},
      {"train", "checkpoint_every", [](C& c, const std::string& v) { c.train.checkpoint_every = to_uint(v); },
       [](const C& c) { return std::to_string(c.train.checkpoint_every); }},

      {"eval", "protocol",
       [](C& c, const std::string& v) { c.protocol = v == "auto" ? std::nullopt : std::optional(parse_protocol(v)); },
       [](const C& c) { return c.protocol ? std::string(protocol_name(*c.protocol)) : std::string("auto"); }},
      {"eval", "refresh_batch", [](C& c, const std::string& v) { c.refresh_batch = to_uint(v); },
       [](const C& c) { return std::to_string(c.refresh_batch); }},
      {"eval", "refresh_passes", [](C& c, const std::string& v) { c.refresh_passes = to_uint(v); },
       [](const C& c) { return std::to_string(c.refresh_passes); }},
      {"eval", "lambda",
       [](C& c, const std::string& v) { c.eval_lambda = v == "train" ? std::nullopt : std::optional(to_double(v)); },
       [](const C& c) { return c.eval_lambda ? fmt_double(*c.eval_lambda) : std::string("train"); }},

      {"run", "seeds", [](C& c, const std::string& v) { c.seeds = to_list<std::uint64_t>(v, to_uint); },
       [](const C& c) { return join(c.seeds); }},
      {"run", "output", [](C& c, const std::string& v) { c.output = v; }, [](const C& c) { return c.output; }},
      {"run", "jobs", [](C& c, const std::string& v) { c.jobs = static_cast<int>(to_uint(v)); },
       [](const C& c) { return std::to_string(c.jobs); }},
      {"run", "lambda_mis_grid", [](C& c, const std::string& v) { c.lambda_mis_grid = to_list<double>(v, to_double); },
       [](const C& c) { return join(c.lambda_mis_grid); }},
      {"run", "dump_lambdas", [](C& c, const std::string& v) { c.dump_lambdas = to_list<double>(v, to_double); },
       [](const C& c) { return join(c.dump_lambdas); }},
  };
  return table;
}

const Key* find_key(const std::string& section, const std::string& name) {
  for (const auto& k : keys()) {
    if (section == k.section && name == k.name) return &k;
  }
  return nullptr;
}

struct Line {
  std::size_t number;
  std::string section;
  std::string key;
  std::string value;
};

std::vector<Line> tokenize(std::string_view text, const std::string& source) {
  std::vector<Line> out;
  std::string section;
  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source, number, "unterminated section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      static const std::vector<std::string> sections = {"data", "split", "preprocess", "augment",
                                                        "model", "train", "eval", "run"};
      if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
        throw ConfigError(source, number, "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source, number, "expected 'key = value', got '" + line + "'");
    Line l{number, section, trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1))};
    if (l.key.empty()) throw ConfigError(source, number, "missing key before '='");
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

Protocol ExperimentConfig::resolved_protocol() const {
  return protocol.value_or(default_protocol(zca, augmentation.enabled()));
}

void ExperimentConfig::validate() const {
  if (architecture != "conv-large" && architecture != "conv-tiny") {
    throw std::invalid_argument("architecture must be conv-large or conv-tiny, got '" + architecture + "'");
  }
  if (seeds.empty()) throw std::invalid_argument("seed list is empty");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  if (labels_per_class == 0) throw std::invalid_argument("labels_per_class must be positive");
  if (!(zca_epsilon >= 0.0)) throw std::invalid_argument("zca_epsilon must be >= 0");
  if (refresh_batch == 0 || refresh_passes == 0) throw std::invalid_argument("refresh batch and passes must be positive");
  if (const double l = resolved_eval_lambda(); !(l > 0.0 && l < 1.0)) throw std::invalid_argument("eval lambda must lie in (0, 1)");
  for (double l : dump_lambdas) {
    if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("dump lambdas must lie in (0, 1)");
  }
  for (double l : lambda_mis_grid) {
    if (!(l >= 0.0 && l <= 100.0)) throw std::invalid_argument("lambda_mis grid values must lie in [0, 100]");
  }
  if (train.roi_weight == RoiWeight::LabelProbability && (unlabeled > 0 || lambda_mis)) {
    throw std::invalid_argument("roi_weight = label-probability trains on D_L alone; unlabeled and lambda_mis must be unset");
  }
  TrainConfig t = train;
  if (t.block_rows == 0) t.block_rows = t.block_cols = 1;
  t.validate();
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  if (!profile.empty()) os << "profile = " << profile << "\n";
  std::string section;
  for (const auto& k : keys()) {
    if (section != k.section) {
      section = k.section;
      os << "\n[" << section << "]\n";
    }
    os << k.name << " = " << k.get(*this) << "\n";
  }
  return os.str();
}

std::vector<std::string> profile_names() { return {"svhn+", "svhn", "cifar10+", "cifar10", "glyph"}; }

ExperimentConfig profile_config(std::string_view name) {
  ExperimentConfig c;
  c.profile = std::string(name);
  c.architecture = "conv-large";
  c.validation = 1000;
  c.train.terms = LossTerms::parse("VAT+ROIreg+ENT");
  c.train.lambda = 0.5;
  c.train.block_rows = c.train.block_cols = 4;
  c.train.lambda_aug = 0.05;
  c.train.log_every = 500;
  const bool augmented = !name.empty() && name.back() == '+';
  if (name == "svhn+" || name == "svhn") {
    c.labels_per_class = 100;
    c.train.rho_roi = 0.9;
    c.train.vat.epsilon = augmented ? 3.5 : 2.5;
    c.train.schedule = AdamSchedule{0.001, 48000, 16000};
    c.augmentation.max_translation = augmented ? 2 : 0;
  } else if (name == "cifar10+" || name == "cifar10") {
    c.labels_per_class = 400;
    c.zca = true;
    c.train.rho_roi = 1.5;
    c.train.vat.epsilon = augmented ? 8.0 : 10.0;
    c.train.schedule = AdamSchedule{0.001, 200000, 16000};
    c.augmentation.max_translation = augmented ? 2 : 0;
    c.augmentation.flip = augmented;
  } else if (name == "glyph") {
    c.architecture = "conv-tiny";
    c.labels_per_class = 8;
    c.validation = 100;
    c.unlabeled = 2000;
    c.train.rho_roi = 1.0;
    c.train.vat.epsilon = 1.0;
    c.train.block_rows = c.train.block_cols = 2;
    c.train.schedule = AdamSchedule{0.001, 3000, 1000};
    c.train.m_l = 32;
    c.train.m_ul = 32;
    c.train.log_every = 100;
    c.augmentation.max_translation = 2;
    c.protocol = Protocol::Error4;
    c.seeds = {1, 2, 3, 4, 5};
    c.lambda_mis_grid = {0.0, 100.0};
    return c;
  } else {
    std::string all;
    for (const auto& p : profile_names()) all += (all.empty() ? "" : ", ") + p;
    throw std::invalid_argument("unknown profile '" + std::string(name) + "' (known: " + all + ")");
  }
  c.train.m_l = augmented ? 64 : 32;
  c.train.m_ul = augmented ? 96 : 128;
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  const std::vector<Line> lines = tokenize(text, source);
  ExperimentConfig c;
  for (const auto& l : lines) {
    if (l.key != "profile") continue;
    try {
      c = profile_config(l.value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source, l.number, e.what());
    }
  }
  for (const auto& l : lines) {
    if (l.key == "profile") continue;
    const Key* k = find_key(l.section, l.key);
    if (!k) {
      throw ConfigError(source, l.number,
                        "unknown key '" + l.key + "'" + (l.section.empty() ? " outside any section" : " in [" + l.section + "]"));
    }
    try {
      k->set(c, l.value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source, l.number, l.section + "." + l.key + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source, 0, e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string(), 0, "cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_environment(ExperimentConfig& config) {
  if (const char* s = std::getenv("RRLAB_SEED"); s && *s) {
    try {
      config.seeds = {to_uint(trim(s))};
    } catch (const std::invalid_argument& e) {
      throw ConfigError("RRLAB_SEED", 0, e.what());
    }
  }
}

}  // namespace rrlab
