#include "attnbias/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>

#include "attnbias/table.hpp"

namespace attnbias {

namespace {

using Setter = std::function<std::optional<std::string>(ExperimentConfig&, std::string_view)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
  bool hashed = true;
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  return v;
}

std::string range_text(double lo, double hi) {
  return "[" + format_double(lo) + ", " + format_double(hi) + "]";
}

template <class Access>
Field int_field(Access access, long long lo, long long hi) {
  return {[=](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
            auto x = parse_number<long long>(v);
            if (!x) return "expected an integer, got \"" + std::string(v) + "\"";
            if (*x < lo || *x > hi) {
              return "value " + std::to_string(*x) + " out of range [" + std::to_string(lo) + ", " +
                     std::to_string(hi) + "]";
            }
            access(c) = static_cast<int>(*x);
            return std::nullopt;
          },
          [=](const ExperimentConfig& c) { return std::to_string(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field real_field(Access access, double lo, double hi, bool open_lo = false) {
  return {[=](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
            auto x = parse_number<double>(v);
            if (!x) return "expected a finite number, got \"" + std::string(v) + "\"";
            if (*x < lo || *x > hi || (open_lo && *x == lo)) {
              return "value " + format_double(*x) + " out of range " + (open_lo ? "(" : "[") +
                     range_text(lo, hi).substr(1);
            }
            access(c) = *x;
            return std::nullopt;
          },
          [=](const ExperimentConfig& c) { return format_double(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field bool_field(Access access) {
  return {[=](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
            if (v == "true") access(c) = true;
            else if (v == "false") access(c) = false;
            else return "expected true or false, got \"" + std::string(v) + "\"";
            return std::nullopt;
          },
          [=](const ExperimentConfig& c) {
            return std::string(access(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

template <class Access>
Field real_list_field(Access access, double lo, double hi, std::size_t min_len) {
  return {[=](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
            std::vector<double> out;
            for (auto part : split(v, ',')) {
              auto x = parse_number<double>(part);
              if (!x) return "expected a comma-separated list of numbers, got \"" + std::string(part) + "\"";
              if (*x < lo || *x > hi) return "list entry " + format_double(*x) + " out of range " + range_text(lo, hi);
              out.push_back(*x);
            }
            if (out.size() < min_len) return "expected at least " + std::to_string(min_len) + " entries";
            access(c) = std::move(out);
            return std::nullopt;
          },
          [=](const ExperimentConfig& c) {
            std::string s;
            for (double x : access(const_cast<ExperimentConfig&>(c))) s += (s.empty() ? "" : ",") + format_double(x);
            return s;
          }};
}

const std::map<std::string, Field>& schema() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    f["experiment"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                         const auto& names = experiment_names();
                         if (std::find(names.begin(), names.end(), v) == names.end()) {
                           std::string list;
                           for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
                           return "unknown experiment \"" + std::string(v) + "\" (expected one of " + list + ")";
                         }
                         c.experiment = std::string(v);
                         return std::nullopt;
                       },
                       [](const ExperimentConfig& c) { return c.experiment; }};
    f["seed"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                   auto x = parse_number<std::uint64_t>(v);
                   if (!x) return "expected an unsigned 64-bit integer, got \"" + std::string(v) + "\"";
                   c.seed = *x;
                   return std::nullopt;
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }};
    f["replicas"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                       auto x = parse_number<long long>(v);
                       if (!x) return "expected an integer, got \"" + std::string(v) + "\"";
                       if (*x < 1 || *x > 100000000) return "value " + std::to_string(*x) + " out of range [1, 100000000]";
                       c.replicas = static_cast<int>(*x);
                       return std::nullopt;
                     },
                     [](const ExperimentConfig& c) { return c.replicas ? std::to_string(*c.replicas) : std::string(); }};
    f["threads"] = int_field([](ExperimentConfig& c) -> int& { return c.threads; }, 1, 1024);
    f["threads"].hashed = false;
    f["output_dir"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                         if (v.empty()) return "path must not be empty";
                         c.output_dir = std::string(v);
                         return std::nullopt;
                       },
                       [](const ExperimentConfig& c) { return c.output_dir; }, false};

    const std::string rpe = "engine.positional-rpe.";
    f[rpe + "instances"] = int_field([](ExperimentConfig& c) -> int& { return c.rpe.instances; }, 1, 1000000);
    f[rpe + "T"] = int_field([](ExperimentConfig& c) -> int& { return c.rpe.T; }, 2, 4096);
    f[rpe + "d"] = int_field([](ExperimentConfig& c) -> int& { return c.rpe.d; }, 1, 4096);
    f[rpe + "window"] = int_field([](ExperimentConfig& c) -> int& { return c.rpe.window; }, 1, 4095);
    f[rpe + "alpha"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                          const auto parts = split(v, ':');
                          if (parts.size() != 3) return "expected min:max:step, got \"" + std::string(v) + "\"";
                          auto lo = parse_number<double>(parts[0]);
                          auto hi = parse_number<double>(parts[1]);
                          auto step = parse_number<double>(parts[2]);
                          if (!lo || !hi || !step) return "expected numbers in min:max:step, got \"" + std::string(v) + "\"";
                          if (*lo < 0.0 || *hi < *lo || *step <= 0.0) return "need 0 <= min <= max and step > 0";
                          c.rpe.alpha_min = *lo;
                          c.rpe.alpha_max = *hi;
                          c.rpe.alpha_step = *step;
                          return std::nullopt;
                        },
                        [](const ExperimentConfig& c) {
                          return format_double(c.rpe.alpha_min) + ":" + format_double(c.rpe.alpha_max) + ":" +
                                 format_double(c.rpe.alpha_step);
                        }};
    f[rpe + "distances"] = {[](ExperimentConfig& c, std::string_view v) -> std::optional<std::string> {
                              static const std::set<std::string> known{"alibi", "log-decay", "gaussian-decay"};
                              std::vector<std::string> out;
                              for (auto part : split(v, ',')) {
                                if (!known.count(std::string(part))) {
                                  return "unknown distance function \"" + std::string(part) + "\"";
                                }
                                out.emplace_back(part);
                              }
                              c.rpe.distances = std::move(out);
                              return std::nullopt;
                            },
                            [](const ExperimentConfig& c) {
                              std::string s;
                              for (const auto& x : c.rpe.distances) s += (s.empty() ? "" : ",") + x;
                              return s;
                            }};
    f[rpe + "fd_step"] = real_field([](ExperimentConfig& c) -> double& { return c.rpe.fd_step; }, 0.0, 1.0, true);
    f[rpe + "fd_rel_tol"] = real_field([](ExperimentConfig& c) -> double& { return c.rpe.fd_rel_tol; }, 0.0, 1.0, true);

    const std::string rope = "engine.positional-rope.";
    f[rope + "bands"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.bands; }, 1, 1000000);
    f[rope + "R"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.R; }, 1, 1024);
    f[rope + "T"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.T; }, 2, 4096);
    f[rope + "window"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.window; }, 1, 4095);
    f[rope + "base"] = real_field([](ExperimentConfig& c) -> double& { return c.rope.base; }, 1.0, 1e12);
    f[rope + "theta_points"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.theta_points; }, 2, 1000000);
    f[rope + "reconstruct_vectors"] =
        int_field([](ExperimentConfig& c) -> int& { return c.rope.reconstruct_vectors; }, 1, 10000000);
    f[rope + "reconstruct_tol"] =
        real_field([](ExperimentConfig& c) -> double& { return c.rope.reconstruct_tol; }, 0.0, 1.0, true);
    f[rope + "free_multiple"] =
        real_field([](ExperimentConfig& c) -> double& { return c.rope.free_multiple; }, 1.0, 1e6, true);
    f[rope + "free_points"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.free_points; }, 2, 1000000);
    f[rope + "search_limit"] = int_field([](ExperimentConfig& c) -> int& { return c.rope.search_limit; }, 1, 1000000);

    const std::string pop = "engine.popularity.";
    f[pop + "p"] = real_list_field([](ExperimentConfig& c) -> std::vector<double>& { return c.popularity.p; }, 0.0, 1.0, 2);
    f[pop + "dim"] = int_field([](ExperimentConfig& c) -> int& { return c.popularity.dim; }, 1, 4096);
    f[pop + "noise"] = real_field([](ExperimentConfig& c) -> double& { return c.popularity.noise; }, 0.0, 1e6);
    f[pop + "query_bound"] =
        real_field([](ExperimentConfig& c) -> double& { return c.popularity.query_bound; }, 0.0, 1e12, true);
    f[pop + "drift_eta"] = real_field([](ExperimentConfig& c) -> double& { return c.popularity.drift_eta; }, 0.0, 1e6);
    f[pop + "drift_replicas"] =
        int_field([](ExperimentConfig& c) -> int& { return c.popularity.drift_replicas; }, 2, 100000000);
    f[pop + "eta"] = real_field([](ExperimentConfig& c) -> double& { return c.popularity.eta; }, 0.0, 1e6);
    f[pop + "steps"] = int_field([](ExperimentConfig& c) -> int& { return c.popularity.steps; }, 0, 100000000);
    f[pop + "seeds"] = int_field([](ExperimentConfig& c) -> int& { return c.popularity.seeds; }, 1, 1000000);
    f[pop + "fd_instances"] = int_field([](ExperimentConfig& c) -> int& { return c.popularity.fd_instances; }, 1, 10000000);
    f[pop + "fd_rel_tol"] =
        real_field([](ExperimentConfig& c) -> double& { return c.popularity.fd_rel_tol; }, 0.0, 1.0, true);

    const std::string lat = "engine.latent.";
    f[lat + "sigmas"] =
        real_list_field([](ExperimentConfig& c) -> std::vector<double>& { return c.latent.sigmas; }, 0.0, 100.0, 1);
    f[lat + "draws"] = int_field([](ExperimentConfig& c) -> int& { return c.latent.draws; }, 100, 100000000);
    f[lat + "tail_c"] = real_field([](ExperimentConfig& c) -> double& { return c.latent.tail_c; }, 1.0, 1e12, true);

    const std::string ret = "engine.retrain.";
    f[ret + "p0"] = real_list_field([](ExperimentConfig& c) -> std::vector<double>& { return c.retrain.p0; }, 0.0, 1.0, 2);
    f[ret + "N"] = int_field([](ExperimentConfig& c) -> int& { return c.retrain.N; }, 2, 100000000);
    f[ret + "N_hat"] = int_field([](ExperimentConfig& c) -> int& { return c.retrain.N_hat; }, 2, 100000000);
    f[ret + "rounds"] = int_field([](ExperimentConfig& c) -> int& { return c.retrain.rounds; }, 1, 100000);
    f[ret + "replicas"] = int_field([](ExperimentConfig& c) -> int& { return c.retrain.replicas; }, 100, 100000000);
    f[ret + "stress"] = bool_field([](ExperimentConfig& c) -> bool& { return c.retrain.stress; });
    f[ret + "fresh_organic"] = bool_field([](ExperimentConfig& c) -> bool& { return c.retrain.fresh_organic; });
    return f;
  }();
  return fields;
}

std::string_view last_segment(std::string_view key) {
  const auto pos = key.rfind('.');
  return pos == std::string_view::npos ? key : key.substr(pos + 1);
}

std::optional<std::string> suggest(std::string_view key) {
  std::optional<std::string> best;
  std::size_t best_score = std::max<std::size_t>(2, key.size() / 4) + 1;
  const auto tail = last_segment(key);
  const auto prefix = key.substr(0, key.size() - tail.size());
  for (const auto& [name, field] : schema()) {
    const std::string_view n = name;
    const auto ntail = last_segment(n);
    const auto nprefix = n.substr(0, n.size() - ntail.size());
    std::size_t score = edit_distance(key, n);
    // A bare misspelled leaf ("alpa") still finds its dotted key.
    if (prefix.empty() || prefix == nprefix) score = std::min(score, edit_distance(tail, ntail));
    if (score < best_score) {
      best_score = score;
      best = name;
    }
  }
  return best;
}

void cross_check(const ExperimentConfig& c, std::vector<ConfigIssue>& issues) {
  auto add = [&](std::string key, std::string msg) { issues.push_back({0, std::move(key), std::move(msg)}); };
  if (c.rpe.window >= c.rpe.T) add("engine.positional-rpe.window", "must be smaller than T");
  if (c.rope.window >= c.rope.T) add("engine.positional-rope.window", "must be smaller than T");
  auto sums_to_one = [](const std::vector<double>& p) {
    double s = 0.0;
    for (double x : p) s += x;
    return std::abs(s - 1.0) <= 1e-12;
  };
  if (!sums_to_one(c.popularity.p)) add("engine.popularity.p", "entries must sum to 1");
  if (static_cast<int>(c.popularity.p.size()) > c.popularity.dim) {
    add("engine.popularity.p", "needs dim >= number of tokens for orthogonal query means");
  }
  if (!sums_to_one(c.retrain.p0)) add("engine.retrain.p0", "entries must sum to 1");
  if (c.replicas && *c.replicas < 100) {
    // The retraining comparison needs 100 replicas; the override applies to it too.
    add("replicas", "must be at least 100 when it overrides the retraining replicas");
  }
}

}  // namespace

std::vector<std::string> ExperimentConfig::engines() const {
  if (experiment == "all") return {"positional-rpe", "positional-rope", "popularity", "latent", "retrain"};
  return {experiment};
}

ConfigError::ConfigError(std::vector<ConfigIssue> issues)
    : std::invalid_argument([&] {
        std::string msg = "invalid config:";
        for (const auto& i : issues) {
          msg += "\n  ";
          if (i.line > 0) msg += "line " + std::to_string(i.line) + ": ";
          if (!i.key.empty()) msg += i.key + ": ";
          msg += i.message;
        }
        return msg;
      }()),
      issues_(std::move(issues)) {}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::vector<ConfigIssue> issues;
  std::map<std::string, int> seen;
  std::string section;
  int lineno = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view raw = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;

    // A '#' inside double quotes is part of the value.
    bool quoted = false;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == '"') quoted = !quoted;
      else if (raw[i] == '#' && !quoted) {
        raw = raw.substr(0, i);
        break;
      }
    }
    const std::string_view line = trim(raw);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        issues.push_back({lineno, "", "malformed section header \"" + std::string(line) + "\""});
        continue;
      }
      section = std::string(trim(line.substr(1, line.size() - 2))) + ".";
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      issues.push_back({lineno, "", "expected key = value, got \"" + std::string(line) + "\""});
      continue;
    }
    const std::string key = section + std::string(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);

    const auto it = schema().find(key);
    if (it == schema().end()) {
      std::string msg = "unknown key";
      if (auto s = suggest(key)) msg += "; did you mean \"" + *s + "\"?";
      issues.push_back({lineno, key, msg});
      continue;
    }
    if (auto [pos, inserted] = seen.emplace(key, lineno); !inserted) {
      issues.push_back({lineno, key, "duplicate key (first set on line " + std::to_string(pos->second) + ")"});
      continue;
    }
    if (auto err = it->second.set(cfg, value)) issues.push_back({lineno, key, *err});
  }

  for (const char* required : {"experiment", "seed"}) {
    if (!seen.count(required)) issues.push_back({0, required, "required key is missing"});
  }
  if (issues.empty()) cross_check(cfg, issues);
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

namespace {

std::string canonical(const ExperimentConfig& cfg, bool hashed_only) {
  std::string out;
  for (const auto& [key, field] : schema()) {
    if (hashed_only && !field.hashed) continue;
    if (key == "replicas" && !cfg.replicas) continue;
    std::string v = field.get(cfg);
    if (key == "output_dir" && v.find_first_of("#\"") != std::string::npos) v = "\"" + v + "\"";
    out += key + " = " + v + "\n";
  }
  return out;
}

}  // namespace

std::string canonical_text(const ExperimentConfig& cfg) { return canonical(cfg, false); }

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical(cfg, true)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : schema()) keys.push_back(k);
  return keys;
}

}  // namespace attnbias
