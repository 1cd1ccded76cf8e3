#include "dppo/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dppo/error.hpp"
#include "dppo/io.hpp"

namespace dppo {

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct Entry {
  std::string value;
  int line = 0;
};

class Reader {
 public:
  explicit Reader(std::map<std::string, Entry> entries)
      : entries_(std::move(entries)) {}

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  int line(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    used_.push_back(key);
    out = convert<T>(key, it->second);
  }

  template <class T>
  void get(const std::string& key, T& out,
           const std::function<bool(const T&)>& ok, const char* invariant) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    get(key, out);
    if (!ok(out))
      throw ConfigError(it->second.line,
                        key + " violates the invariant " + invariant);
  }

  void reject_unused() const {
    for (const auto& [key, e] : entries_)
      if (std::find(used_.begin(), used_.end(), key) == used_.end())
        throw ConfigError(e.line, "unknown key '" + key + "'");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(line(key), key + ": " + msg);
  }

 private:
  template <class T>
  T convert(const std::string& key, const Entry& e) const {
    const std::string& v = e.value;
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw ConfigError(e.line, key + ": expected true or false, got '" + v + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      char* end = nullptr;
      const double x = std::strtod(v.c_str(), &end);
      if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(x))
        throw ConfigError(e.line, key + ": expected a number, got '" + v + "'");
      return x;
    } else {
      T x{};
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(e.line, key + ": expected an integer, got '" + v + "'");
      return x;
    }
  }

  std::map<std::string, Entry> entries_;
  std::vector<std::string> used_;
};

std::vector<int> parse_int_list(Reader& r, const std::string& key,
                                std::string_view text) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  for (auto item : split(text, ',')) {
    int x = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (ec != std::errc() || ptr != item.data() + item.size())
      r.fail(key, "expected a comma-separated integer list");
    out.push_back(x);
  }
  return out;
}

std::string join(const std::vector<int>& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(xs[i]);
  }
  return out;
}

std::string fmt_double(double x) { return format_real(x); }

PruneMode parse_mode(Reader& r, const std::string& key, const std::string& s) {
  if (s == "bernoulli") return PruneMode::bernoulli;
  if (s == "deterministic_fraction") return PruneMode::deterministic_fraction;
  r.fail(key, "expected bernoulli or deterministic_fraction, got '" + s + "'");
}

WeightRule parse_rule(Reader& r, const std::string& key, const std::string& s) {
  if (s == "inclusion_exact") return WeightRule::inclusion_exact;
  if (s == "nominal") return WeightRule::nominal;
  r.fail(key, "expected inclusion_exact or nominal, got '" + s + "'");
}

template <class T>
std::function<bool(const T&)> at_least(T lo) {
  return [lo](const T& x) { return x >= lo; };
}

}  // namespace

bool is_pack_distribution(std::string_view name) {
  return name == "uniform_max" || name == "mixed" || name == "short_heavy";
}

RunConfig parse_config(std::string_view text) {
  std::map<std::string, Entry> entries;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(line_no, "expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(line_no, "empty key");
    if (entries.count(key))
      throw ConfigError(line_no, "duplicate key '" + key + "' (first on line " +
                                     std::to_string(entries[key].line) + ")");
    entries[key] = Entry{std::string(trim(line.substr(eq + 1))), line_no};
    if (end == text.size()) break;
  }

  Reader r(std::move(entries));
  RunConfig cfg;

  // Task shape first: the derived lengths and targets depend on it.
  int n = cfg.task.num_prompts, v = cfg.task.vocab_size,
      l = cfg.task.completion_len;
  r.get<int>("task.num_prompts", n, at_least(1), "num_prompts >= 1");
  r.get<int>("task.vocab_size", v, at_least(2), "vocab_size >= 2");
  r.get<int>("task.completion_len", l, at_least(1), "completion_len >= 1");
  std::size_t cap = cfg.task.enumeration_cap;
  r.get<std::size_t>("task.enumeration_cap", cap, at_least<std::size_t>(1),
                     "enumeration_cap >= 1");
  bool enumerable = true;
  r.get<bool>("task.enumerable", enumerable);
  cfg.task = make_task_spec(n, v, l);
  cfg.task.enumeration_cap = cap;
  cfg.task.enumerable = enumerable;
  if (r.has("task.prompt_lengths")) {
    std::string s;
    r.get("task.prompt_lengths", s);
    cfg.task.prompt_lengths = parse_int_list(r, "task.prompt_lengths", s);
    if (static_cast<int>(cfg.task.prompt_lengths.size()) != n)
      r.fail("task.prompt_lengths", "needs one length per prompt");
    for (int x : cfg.task.prompt_lengths)
      if (x < 1) r.fail("task.prompt_lengths", "lengths must be >= 1");
  }
  if (r.has("task.targets")) {
    std::string s;
    r.get("task.targets", s);
    const auto rows = split(s, ';');
    if (static_cast<int>(rows.size()) != n)
      r.fail("task.targets", "needs one ';'-separated target per prompt");
    cfg.task.target_map.clear();
    for (auto row : rows) {
      auto t = parse_int_list(r, "task.targets", row);
      if (static_cast<int>(t.size()) != l)
        r.fail("task.targets", "each target needs completion_len tokens");
      for (int tok : t)
        if (tok < 0 || tok >= v)
          r.fail("task.targets", "target tokens must be in [0, vocab_size)");
      cfg.task.target_map.push_back(std::move(t));
    }
  }

  TrainConfig& t = cfg.train;
  r.get<std::uint64_t>("seed", t.seed);
  r.get<int>("workers", t.workers, at_least(1), "workers >= 1");
  r.get<bool>("timing", t.record_wallclock);
  r.get<std::string>("output_dir", cfg.output_dir);
  r.get<int>("train.epochs", t.epochs, at_least(1), "epochs >= 1");
  r.get<int>("train.group_size", t.group_size, at_least(2), "group_size >= 2");
  r.get<double>("train.learning_rate", t.learning_rate,
                [](const double& x) { return x > 0.0; }, "learning_rate > 0");
  r.get<int>("train.batch_prompts", t.batch_prompts, at_least(1),
             "batch_prompts >= 1");
  r.get<double>("train.init_scale", t.init_scale, at_least(0.0),
                "init_scale >= 0");

  r.get<double>("surrogate.clip_epsilon", t.surrogate.clip_epsilon,
                [](const double& x) { return x >= 0.0 && x < 1.0; },
                "0 <= clip_epsilon < 1");
  r.get<double>("surrogate.kl_beta", t.surrogate.kl_beta, at_least(0.0),
                "kl_beta >= 0");
  r.get<bool>("surrogate.use_clip", t.surrogate.use_clip);
  r.get<bool>("surrogate.token_level", t.surrogate.token_level);

  const auto unit = [](const double& x) { return x >= 0.0 && x < 1.0; };
  r.get<double>("pruning.r_o", t.pruning.r_o, unit, "0 <= r_o < 1");
  r.get<double>("pruning.r_q", t.pruning.r_q, unit, "0 <= r_q < 1");
  r.get<double>("pruning.beta", t.pruning.beta,
                [](const double& x) { return x > 0.0 && x <= 1.0; },
                "0 < beta <= 1");
  if (r.has("pruning.prune_mode")) {
    std::string s;
    r.get("pruning.prune_mode", s);
    t.pruning.mode = parse_mode(r, "pruning.prune_mode", s);
  }
  if (r.has("pruning.weights")) {
    std::string s;
    r.get("pruning.weights", s);
    t.pruning.weights = parse_rule(r, "pruning.weights", s);
  }

  r.get<int>("packing.l_max", t.l_max, at_least(0), "l_max >= 0");
  r.get<int>("packing.n_win", t.n_win, at_least(1), "n_win >= 1");
  if (r.has("packing.pack_strategy")) {
    std::string s;
    r.get("packing.pack_strategy", s);
    try {
      t.pack_strategy = parse_pack_strategy(s);
    } catch (const Error& e) {
      r.fail("packing.pack_strategy", e.what());
    }
  }

  r.get<std::size_t>("verify.trials", cfg.verify.trials,
                     at_least<std::size_t>(10'000), "trials >= 10000");
  r.get<double>("verify.fd_step", cfg.verify.fd_step,
                [](const double& x) { return x > 0.0; }, "fd_step > 0");

  PackBenchConfig& pb = cfg.pack_bench;
  r.get<int>("pack_bench.num_prompts", pb.num_prompts, at_least(0),
             "num_prompts >= 0");
  r.get<int>("pack_bench.l_max", pb.l_max, at_least(2), "l_max >= 2");
  r.get<int>("pack_bench.num_profiles", pb.num_profiles, at_least(1),
             "num_profiles >= 1");
  if (r.has("pack_bench.distributions")) {
    std::string s;
    r.get("pack_bench.distributions", s);
    pb.distributions.clear();
    for (auto d : split(s, ',')) {
      if (!is_pack_distribution(d))
        r.fail("pack_bench.distributions",
               "unknown distribution '" + std::string(d) + "'");
      pb.distributions.emplace_back(d);
    }
  }

  r.reject_unused();

  if (t.pack_strategy != PackStrategy::off && t.l_max > 0)
    for (int len : cfg.task.prompt_lengths)
      if (len > t.l_max)
        throw ConfigError(r.line("packing.l_max"),
                          "packing.l_max is smaller than a prompt length (" +
                              std::to_string(len) + ")");
  try {
    cfg.task.validate();
    t.validate();
  } catch (const CapacityError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(0, e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(0, "cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::ostringstream o;
  o << "# effective configuration\n";
  o << "seed=" << t.seed << "\n";
  o << "workers=" << t.workers << "\n";
  o << "timing=" << (t.record_wallclock ? "true" : "false") << "\n";
  o << "output_dir=" << cfg.output_dir << "\n";
  o << "task.num_prompts=" << cfg.task.num_prompts << "\n";
  o << "task.vocab_size=" << cfg.task.vocab_size << "\n";
  o << "task.completion_len=" << cfg.task.completion_len << "\n";
  o << "task.enumerable=" << (cfg.task.enumerable ? "true" : "false") << "\n";
  o << "task.enumeration_cap=" << cfg.task.enumeration_cap << "\n";
  o << "task.prompt_lengths=" << join(cfg.task.prompt_lengths, ',') << "\n";
  o << "task.targets=";
  for (std::size_t q = 0; q < cfg.task.target_map.size(); ++q)
    o << (q ? ";" : "") << join(cfg.task.target_map[q], ',');
  o << "\n";
  o << "train.epochs=" << t.epochs << "\n";
  o << "train.group_size=" << t.group_size << "\n";
  o << "train.learning_rate=" << fmt_double(t.learning_rate) << "\n";
  o << "train.batch_prompts=" << t.batch_prompts << "\n";
  o << "train.init_scale=" << fmt_double(t.init_scale) << "\n";
  o << "surrogate.clip_epsilon=" << fmt_double(t.surrogate.clip_epsilon) << "\n";
  o << "surrogate.kl_beta=" << fmt_double(t.surrogate.kl_beta) << "\n";
  o << "surrogate.use_clip=" << (t.surrogate.use_clip ? "true" : "false") << "\n";
  o << "surrogate.token_level=" << (t.surrogate.token_level ? "true" : "false")
    << "\n";
  o << "pruning.r_o=" << fmt_double(t.pruning.r_o) << "\n";
  o << "pruning.r_q=" << fmt_double(t.pruning.r_q) << "\n";
  o << "pruning.beta=" << fmt_double(t.pruning.beta) << "\n";
  o << "pruning.prune_mode="
    << (t.pruning.mode == PruneMode::bernoulli ? "bernoulli"
                                               : "deterministic_fraction")
    << "\n";
  o << "pruning.weights="
    << (t.pruning.weights == WeightRule::nominal ? "nominal" : "inclusion_exact")
    << "\n";
  o << "packing.l_max=" << t.l_max << "\n";
  o << "packing.n_win=" << t.n_win << "\n";
  o << "packing.pack_strategy=" << to_string(t.pack_strategy) << "\n";
  o << "verify.trials=" << cfg.verify.trials << "\n";
  o << "verify.fd_step=" << fmt_double(cfg.verify.fd_step) << "\n";
  o << "pack_bench.num_prompts=" << cfg.pack_bench.num_prompts << "\n";
  o << "pack_bench.l_max=" << cfg.pack_bench.l_max << "\n";
  o << "pack_bench.num_profiles=" << cfg.pack_bench.num_profiles << "\n";
  o << "pack_bench.distributions=";
  for (std::size_t i = 0; i < cfg.pack_bench.distributions.size(); ++i)
    o << (i ? "," : "") << cfg.pack_bench.distributions[i];
  o << "\n";
  return o.str();
}

}  // namespace dppo
