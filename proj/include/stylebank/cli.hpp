#pragma once

// Command-line front end. Requires CLI11, nlohmann/json and spdlog.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "stylebank/attention_cache.hpp"
#include "stylebank/digest.hpp"
#include "stylebank/error.hpp"
#include "stylebank/image.hpp"
#include "stylebank/metrics.hpp"
#include "stylebank/norm_stats.hpp"
#include "stylebank/pipeline.hpp"
#include "stylebank/style_bank.hpp"
#include "stylebank/style_embedding.hpp"
#include "stylebank/tensor_file.hpp"
#include "stylebank/toy_model.hpp"

namespace stylebank::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// -- config -------------------------------------------------------------------

inline json to_json(const StylizeConfig& c) {
  return json{{"steps", c.steps},
              {"structure_fraction", c.structure_fraction},
              {"two_stage", c.two_stage},
              {"low_res", c.low_res},
              {"high_res", c.high_res},
              {"moment_order", c.moment_order},
              {"latent_moment_order", c.latent_moment_order},
              {"w_lineart", c.w_lineart},
              {"w_depth", c.w_depth},
              {"inject_self", c.inject_self},
              {"inject_cross", c.inject_cross},
              {"align_latents", c.align_latents},
              {"align_latents_in_structure_stage", c.align_latents_in_structure_stage},
              {"seed", c.seed},
              {"prompt", c.prompt}};
}

/// Reads a config document; absent fields keep their defaults, unknown
/// fields are rejected.
inline StylizeConfig stylize_config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("config: expected a JSON object");
  StylizeConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "steps") c.steps = value.get<std::size_t>();
      else if (key == "structure_fraction") c.structure_fraction = value.get<double>();
      else if (key == "two_stage") c.two_stage = value.get<bool>();
      else if (key == "low_res") c.low_res = value.get<std::size_t>();
      else if (key == "high_res") c.high_res = value.get<std::size_t>();
      else if (key == "moment_order") c.moment_order = value.get<int>();
      else if (key == "latent_moment_order") c.latent_moment_order = value.get<int>();
      else if (key == "w_lineart") c.w_lineart = value.get<float>();
      else if (key == "w_depth") c.w_depth = value.get<float>();
      else if (key == "inject_self") c.inject_self = value.get<bool>();
      else if (key == "inject_cross") c.inject_cross = value.get<bool>();
      else if (key == "align_latents") c.align_latents = value.get<bool>();
      else if (key == "align_latents_in_structure_stage") c.align_latents_in_structure_stage = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "prompt") c.prompt = value.get<std::string>();
      else throw InvalidArgument("config: unknown field '" + key + "'");
    } catch (const json::exception& e) {
      throw InvalidArgument("config: field '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

inline StylizeConfig read_stylize_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::io, path.string() + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  return stylize_config_from_json(j);
}

// -- manifest -----------------------------------------------------------------

/// Record of one command run: config, file digests and phase timings.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(Clock::now()) {}

  json& config() { return config_; }

  void input(const fs::path& p) { inputs_.push_back({{"path", p.string()}, {"digest", file_digest(p)}}); }
  void output(const fs::path& p) { outputs_.push_back({{"path", p.string()}, {"digest", file_digest(p)}}); }
  void output_text(const std::string& name, const std::string& text) {
    outputs_.push_back({{"path", name}, {"digest", digest_hex(fnv1a(text))}});
  }
  void metric(const std::string& name, double value) { metrics_[name] = value; }

  template <class F>
  decltype(auto) phase(const std::string& name, F&& fn) {
    const auto t0 = Clock::now();
    struct Done {
      Manifest& m;
      std::string name;
      Clock::time_point t0;
      ~Done() {
        const double s = std::chrono::duration<double>(Clock::now() - t0).count();
        m.phases_.push_back({{"name", name}, {"seconds", s}});
        spdlog::info("{}: {:.4f} s", name, s);
      }
    } done{*this, name, t0};
    return fn();
  }

  json document() const {
    json doc{{"command", command_}, {"config", config_}, {"inputs", inputs_}, {"outputs", outputs_},
             {"phases", phases_}};
    if (!metrics_.empty()) doc["metrics"] = metrics_;
    doc["total_seconds"] = std::chrono::duration<double>(Clock::now() - start_).count();
    return doc;
  }

  const json& outputs() const noexcept { return outputs_; }

  void write(const fs::path& path) const {
    const std::string text = document().dump(2) + "\n";
    write_file_synced(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  }

  static std::string file_digest(const fs::path& p) {
    const auto bytes = read_file(p);
    return digest_hex(fnv1a(std::span<const std::uint8_t>(bytes)));
  }

 private:
  using Clock = std::chrono::steady_clock;
  std::string command_;
  Clock::time_point start_;
  json config_ = json::object();
  json inputs_ = json::array();
  json outputs_ = json::array();
  json phases_ = json::array();
  json metrics_ = json::object();
};

// -- helpers ------------------------------------------------------------------

/// Sorted `*.ppm` files of a directory.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError(FormatErrc::io, dir.string() + ": not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw FormatError(FormatErrc::not_found, dir.string() + ": no .ppm images");
  return out;
}

inline Tensor latent_tensor(const LatentImage& x) {
  return {{static_cast<std::uint32_t>(x.height), static_cast<std::uint32_t>(x.width),
           static_cast<std::uint32_t>(x.channels())},
          x.tokens.storage()};
}

inline StyleEmbedding read_style_embedding(const fs::path& p, const ToyModel& model) {
  StyleEmbedding phi{to_matrix(read_tensor(p))};
  if (phi.tokens.rows() != kStyleTokens || phi.tokens.cols() != model.config().dim) {
    throw FormatError(FormatErrc::shape_mismatch, p.string() + ": expected " + std::to_string(kStyleTokens) + "x" +
                                                      std::to_string(model.config().dim) + " tokens");
  }
  return phi;
}

struct OpenedCaches {
  std::vector<CacheReader> readers;
  std::vector<const CacheReader*> ptrs;
};

inline OpenedCaches open_caches(const std::vector<std::string>& paths, Manifest& m) {
  OpenedCaches out;
  out.readers.reserve(paths.size());
  for (const auto& p : paths) {
    out.readers.push_back(open_cache(p));
    m.input(p);
  }
  for (const auto& r : out.readers) out.ptrs.push_back(&r);
  return out;
}

// -- commands -------------------------------------------------------------------

struct Common {
  unsigned threads = 1;
  std::string manifest;
  std::uint64_t model_seed = ModelConfig{}.seed;
  std::string log_level = "warn";
};

struct InvertArgs {
  std::string image, out, stats_out, latent_out;
  std::size_t steps = 10;
  std::optional<std::uint64_t> source_id;
};

inline void cmd_invert(const Common& g, const InvertArgs& a, Manifest& m) {
  m.config() = {{"steps", a.steps}, {"model_seed", g.model_seed}};
  const ToyModel model = m.phase("model", [&] { return build_toy_model(g.model_seed); });
  const Image img = m.phase("load", [&] {
    m.input(a.image);
    return read_ppm(a.image);
  });
  const std::uint64_t source_id = a.source_id.value_or(std::stoull(Manifest::file_digest(a.image), nullptr, 16));
  auto inv = m.phase("invert", [&] { return invert_style(model, img, a.steps); });
  m.phase("write", [&] {
    write_cache(inv.entries, a.out, source_id);
    if (!a.stats_out.empty()) write_norm_stats(inv.stats, a.stats_out);
    if (!a.latent_out.empty()) write_tensor(latent_tensor(inv.noise), a.latent_out);
    m.output(a.out);
    if (!a.stats_out.empty()) m.output(a.stats_out);
    if (!a.latent_out.empty()) m.output(a.latent_out);
  });
}

struct DistillArgs {
  std::vector<std::string> caches;
  std::string out;
  std::uint64_t seed = 0;
  double k_scale = 1.0;
  bool saturate = false;
  int max_iters = KMeansOptions{}.max_iters;
  float tol = KMeansOptions{}.tol;
};

inline void cmd_distill(const Common& g, const DistillArgs& a, Manifest& m) {
  m.config() = {{"seed", a.seed}, {"k_scale", a.k_scale}, {"saturate", a.saturate}, {"max_iters", a.max_iters},
                {"tol", a.tol}};
  auto caches = m.phase("open", [&] { return open_caches(a.caches, m); });
  DistillOptions opt;
  opt.threads = g.threads;
  opt.kmeans.max_iters = a.max_iters;
  opt.kmeans.tol = a.tol;
  const KPolicy policy = a.saturate ? KPolicy::saturated() : KPolicy::single_image(a.k_scale);
  const StyleBank bank = m.phase("distill", [&] { return distill(caches.ptrs, policy, a.seed, opt); });
  m.phase("write", [&] {
    write_bank(bank, a.out);
    m.output(a.out);
  });
  std::uint64_t single = 0;
  for (const auto& r : caches.readers) single = std::max(single, r.payload_bytes());
  m.metric("bank_payload_bytes", static_cast<double>(bank.payload_bytes()));
  m.metric("max_cache_payload_bytes", static_cast<double>(single));
}

inline std::vector<Image> load_styles(const fs::path& dir, Manifest& m) {
  std::vector<Image> out;
  for (const auto& p : list_images(dir)) {
    out.push_back(read_ppm(p));
    m.input(p);
  }
  return out;
}

struct FinetuneArgs {
  std::string styles, out, init, loss_csv;
  std::size_t steps = 100;
  double lr = 1e-2;
  std::size_t batch = FinetuneOptions{}.batch;
  std::uint64_t seed = 0;
  double init_scale = 1.0;
};

inline void cmd_finetune(const Common& g, const FinetuneArgs& a, Manifest& m) {
  m.config() = {{"steps", a.steps}, {"lr", a.lr}, {"batch", a.batch}, {"seed", a.seed},
                {"init_scale", a.init_scale}, {"model_seed", g.model_seed}};
  const ToyModel model = m.phase("model", [&] { return build_toy_model(g.model_seed); });
  const auto images = m.phase("load", [&] { return load_styles(a.styles, m); });
  const ProjectionWeights a0 = m.phase("init", [&] {
    if (a.init.empty()) return init_projection(kEmbeddingDim, model.config().dim, mix_seed(a.seed, 0x696e6974), a.init_scale);
    m.input(a.init);
    return read_projection(a.init);
  });
  const auto samples = m.phase("encode", [&] {
    std::vector<StyleSample> s;
    for (const auto& img : images) s.push_back({model.encode(img), mock_image_embed(img)});
    return s;
  });
  FinetuneOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.batch = a.batch;
  opt.seed = a.seed;
  const auto checksum = model.checksum();
  const auto res = m.phase("train", [&] { return finetune_adapter(a0, samples, model, opt); });
  if (model.checksum() != checksum) throw NumericError("finetune: model weights changed");
  m.phase("write", [&] {
    write_projection(res.weights, a.out);
    if (!a.loss_csv.empty()) {
      std::ostringstream csv;
      csv.precision(12);
      csv << "step,loss\n";
      for (std::size_t i = 0; i < res.loss_history.size(); ++i) csv << i << ',' << res.loss_history[i] << '\n';
      const std::string text = csv.str();
      write_file_synced(a.loss_csv, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
      m.output(a.loss_csv);
    }
    m.output(a.out);
  });
  const auto [first, last] = loss_endpoints(res.loss_history);
  m.metric("initial_loss", first);
  m.metric("final_loss", last);
}

struct EmbedArgs {
  std::string styles, adapter, out;
  std::size_t crop_px = 0;
  std::size_t crops_per_image = 1;
  std::uint64_t seed = 0;
};

inline void cmd_embed(const Common&, const EmbedArgs& a, Manifest& m) {
  m.config() = {{"crop_px", a.crop_px}, {"crops_per_image", a.crops_per_image}, {"seed", a.seed}};
  const auto images = m.phase("load", [&] { return load_styles(a.styles, m); });
  const auto adapter = m.phase("adapter", [&] {
    m.input(a.adapter);
    return read_projection(a.adapter);
  });
  const auto phi = m.phase("embed", [&] { return embed_styles(images, adapter, a.crop_px, a.crops_per_image, a.seed); });
  m.phase("write", [&] {
    write_tensor(to_tensor(phi.tokens), a.out);
    m.output(a.out);
  });
}

struct AvgImageArgs {
  std::string phi, out, stats, image_out;
  std::uint64_t seed = 0;
  std::size_t steps = 10;
  std::size_t size = 16;
};

inline void cmd_avgimage(const Common& g, const AvgImageArgs& a, Manifest& m) {
  m.config() = {{"seed", a.seed}, {"steps", a.steps}, {"size", a.size}, {"model_seed", g.model_seed}};
  if (a.size == 0 || a.size % 2) throw InvalidArgument("avgimage: --size must be a positive even pixel count");
  const ToyModel model = m.phase("model", [&] { return build_toy_model(g.model_seed); });
  const auto phi = m.phase("load", [&] {
    m.input(a.phi);
    return read_style_embedding(a.phi, model);
  });
  const auto avg = m.phase("generate", [&] { return generate_average_image(model, phi, a.steps, a.seed, a.size / 2, a.size / 2); });
  m.phase("write", [&] {
    write_tensor(latent_tensor(avg.latent), a.out);
    write_norm_stats(avg.stats, a.stats);
    if (!a.image_out.empty()) write_ppm(model.decode(avg.latent), a.image_out);
    m.output(a.out);
    m.output(a.stats);
    if (!a.image_out.empty()) m.output(a.image_out);
  });
}

struct StylizeArgs {
  std::string content, bank, stats, phi, config, out, latent_out;
  std::vector<std::string> caches;
  std::string bank_lo, stats_lo;
  std::vector<std::string> caches_lo;
  std::optional<std::uint64_t> seed;
};

/// Style rows for one resolution: a distilled bank or the per-image caches.
struct LoadedSource {
  std::optional<StyleBank> bank;
  OpenedCaches caches;
  std::unique_ptr<KvSource> source;
};

inline LoadedSource load_source(const std::string& bank, const std::vector<std::string>& caches, Manifest& m,
                                const char* what) {
  LoadedSource s;
  if (!bank.empty() && !caches.empty()) {
    throw InvalidArgument(std::string("stylize: give either a bank or caches for the ") + what + " stage, not both");
  }
  if (!bank.empty()) {
    s.bank = open_bank(bank);
    m.input(bank);
    s.source = std::make_unique<BankSource>(*s.bank);
  } else if (!caches.empty()) {
    s.caches = open_caches(caches, m);
    s.source = std::make_unique<StreamingSource>(s.caches.ptrs);
  } else {
    throw InvalidArgument(std::string("stylize: no bank or caches for the ") + what + " stage");
  }
  return s;
}

inline void cmd_stylize(const Common& g, const StylizeArgs& a, Manifest& m) {
  StylizeConfig cfg = a.config.empty() ? StylizeConfig{} : read_stylize_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const ToyModel model = m.phase("model", [&] { return build_toy_model(g.model_seed); });
  m.config() = to_json(cfg);
  m.config()["model_seed"] = g.model_seed;
  m.config()["mode"] = a.caches.empty() ? "bank" : "dynamic";

  struct Inputs {
    Image content;
    StyleEmbedding phi;
    NormStats norm;
    LoadedSource hi;
    std::optional<NormStats> norm_lo;
    std::optional<LoadedSource> lo;
  };
  const Inputs in = m.phase("load", [&] {
    Inputs r{read_ppm(a.content), read_style_embedding(a.phi, model), read_norm_stats(a.stats),
             load_source(a.bank, a.caches, m, "main"), std::nullopt, std::nullopt};
    if (!a.config.empty()) m.input(a.config);
    m.input(a.content);
    m.input(a.phi);
    m.input(a.stats);
    if (cfg.two_stage) {
      if (a.stats_lo.empty()) throw InvalidArgument("stylize: two-stage config needs --stats-lo");
      r.norm_lo = read_norm_stats(a.stats_lo);
      m.input(a.stats_lo);
      r.lo = load_source(a.bank_lo, a.caches_lo, m, "low-resolution");
    }
    return r;
  });
  const StylizeResult res = m.phase("stylize", [&] {
    if (cfg.two_stage) {
      return stylize_two_stage(model, in.content, *in.lo->source, *in.hi.source, *in.norm_lo, in.norm, in.phi, cfg);
    }
    return stylize(model, in.content, *in.hi.source, in.norm, in.phi, cfg);
  });
  m.phase("write", [&] {
    write_ppm(res.image, a.out);
    if (!a.latent_out.empty()) write_tensor(latent_tensor(res.latent), a.latent_out);
    m.output(a.out);
    if (!a.latent_out.empty()) m.output(a.latent_out);
  });
}

struct ChamferArgs {
  std::string a, b;
  std::size_t subsample = 4096;
  std::uint64_t seed = 0;
};

inline void cmd_chamfer(const Common&, const ChamferArgs& a, Manifest& m, std::ostream& out) {
  m.config() = {{"subsample", a.subsample}, {"seed", a.seed}};
  const auto [ia, ib] = m.phase("load", [&] {
    m.input(a.a);
    m.input(a.b);
    return std::pair{read_ppm(a.a), read_ppm(a.b)};
  });
  const double d = m.phase("chamfer", [&] { return chamfer_color(ia, ib, a.subsample, a.seed); });
  std::ostringstream text;
  text.precision(9);
  text << d << '\n';
  out << text.str();
  m.output_text("stdout", text.str());
  m.metric("chamfer", d);
}

struct EvalArgs {
  std::string stylized, styles, csv;
  double fraction = 0.1;
  std::uint64_t seed = 0;
  std::size_t subsample = 4096;
};

inline void cmd_eval(const Common& g, const EvalArgs& a, Manifest& m, std::ostream& out) {
  m.config() = {{"fraction", a.fraction}, {"seed", a.seed}, {"subsample", a.subsample}};
  const auto candidates = m.phase("list", [&] { return list_eval_candidates(a.stylized, a.styles); });
  const auto table = m.phase("score", [&] { return eval_candidates(candidates, a.fraction, a.seed, a.subsample, g.threads); });
  const std::string csv = table.to_csv();
  if (a.csv.empty()) {
    out << csv;
    m.output_text("stdout", csv);
  } else {
    m.phase("write", [&] {
      write_file_synced(a.csv, {reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()});
      m.output(a.csv);
    });
  }
  m.metric("pairs", static_cast<double>(table.pairs.size()));
  m.metric("overall", table.overall);
}

/// One line per entry: layer,timestep,head,rows,dim,offset. Rows are
/// n_tokens for caches and k for banks.
inline void cmd_inspect(const std::string& path, Manifest& m, std::ostream& out) {
  std::ostringstream text;
  m.phase("inspect", [&] {
    std::array<std::uint8_t, 4> magic{};
    {
      const File f = File::open_read(path);
      if (f.size() < 4) throw FormatError(FormatErrc::truncated, path + ": shorter than magic");
      f.pread_exact(magic, 0);
    }
    m.input(path);
    if (std::equal(magic.begin(), magic.end(), skvb::kMagic)) {
      const StyleBank bank = open_bank(path);
      const auto offsets = bank_offsets(bank);
      for (std::size_t i = 0; i < bank.entries.size(); ++i) {
        const auto& e = bank.entries[i];
        text << e.key.layer << ',' << e.key.timestep << ',' << e.key.head << ',' << e.k() << ',' << e.keys.cols() << ','
             << offsets[i] << '\n';
      }
    } else {
      const CacheReader r = open_cache(path);
      for (const auto& rec : r.index()) {
        text << rec.key.layer << ',' << rec.key.timestep << ',' << rec.key.head << ',' << rec.n_tokens << ',' << rec.dim
             << ',' << rec.byte_offset << '\n';
      }
    }
  });
  out << text.str();
  m.output_text("stdout", text.str());
}

// -- entry point ------------------------------------------------------------------

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

/// Runs one command. Returns 0 on success, 2 on usage or argument errors,
/// 1 on file, format and numeric errors. Errors are reported on `err` as a
/// single line: `stylebank: error: <kind>: <message>`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-image style distillation and injection on a toy diffusion model", "stylebank"};
  app.require_subcommand(1);
  Common g;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--threads", g.threads, "Upper bound on worker threads")->check(CLI::Range(1u, 1024u));
    sub->add_option("--manifest", g.manifest, "Write a JSON run manifest here");
    sub->add_option("--model-seed", g.model_seed, "Seed of the toy model weights");
    sub->add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");
  };

  InvertArgs inv;
  auto* c_invert = app.add_subcommand("invert", "DDIM-invert a style image and store its self-attention cache");
  c_invert->add_option("--image", inv.image)->required();
  c_invert->add_option("--out", inv.out)->required();
  c_invert->add_option("--steps", inv.steps)->check(CLI::PositiveNumber);
  c_invert->add_option("--stats-out", inv.stats_out, "Also write the image's own query/key/latent statistics");
  c_invert->add_option("--latent-out", inv.latent_out, "Also write the inverted noise latent (.ten)");
  c_invert->add_option("--source-id", inv.source_id, "Source id stored in the cache header (default: image digest)");
  add_common(c_invert);

  DistillArgs dst;
  auto* c_distill = app.add_subcommand("distill", "Cluster several caches into one style bank");
  c_distill->add_option("--caches", dst.caches)->required()->expected(1, -1);
  c_distill->add_option("--out", dst.out)->required();
  c_distill->add_option("--seed", dst.seed);
  auto* k_scale = c_distill->add_option("--k-scale", dst.k_scale, "k as a multiple of the single-image token count")
                      ->check(CLI::PositiveNumber);
  c_distill->add_flag("--saturate", dst.saturate, "Keep every row (k = all tokens)")->excludes(k_scale);
  c_distill->add_option("--max-iters", dst.max_iters)->check(CLI::PositiveNumber);
  c_distill->add_option("--tol", dst.tol)->check(CLI::NonNegativeNumber);
  add_common(c_distill);

  FinetuneArgs ft;
  auto* c_finetune = app.add_subcommand("finetune", "Fine-tune the image-prompt projection on a style set");
  c_finetune->add_option("--styles", ft.styles)->required();
  c_finetune->add_option("--out", ft.out)->required();
  c_finetune->add_option("--steps", ft.steps);
  c_finetune->add_option("--lr", ft.lr)->check(CLI::NonNegativeNumber);
  c_finetune->add_option("--batch", ft.batch)->check(CLI::PositiveNumber);
  c_finetune->add_option("--seed", ft.seed);
  c_finetune->add_option("--init", ft.init, "Start from this adapter instead of a seeded one");
  c_finetune->add_option("--init-scale", ft.init_scale)->check(CLI::PositiveNumber);
  c_finetune->add_option("--loss-csv", ft.loss_csv);
  add_common(c_finetune);

  EmbedArgs emb;
  auto* c_embed = app.add_subcommand("embed", "Average projected embedding of a style set");
  c_embed->add_option("--styles", emb.styles)->required();
  c_embed->add_option("--adapter", emb.adapter)->required();
  c_embed->add_option("--out", emb.out)->required();
  c_embed->add_option("--crop-px", emb.crop_px, "Embed square crops of this size instead of whole images");
  c_embed->add_option("--crops-per-image", emb.crops_per_image)->check(CLI::PositiveNumber);
  c_embed->add_option("--seed", emb.seed);
  add_common(c_embed);

  AvgImageArgs avg;
  auto* c_avg = app.add_subcommand("avgimage", "Generate the average style image and its statistics");
  c_avg->add_option("--phi", avg.phi)->required();
  c_avg->add_option("--out", avg.out)->required();
  c_avg->add_option("--stats", avg.stats)->required();
  c_avg->add_option("--seed", avg.seed);
  c_avg->add_option("--steps", avg.steps)->check(CLI::PositiveNumber);
  c_avg->add_option("--size", avg.size, "Square output size in pixels");
  c_avg->add_option("--image-out", avg.image_out);
  add_common(c_avg);

  StylizeArgs sty;
  auto* c_sty = app.add_subcommand("stylize", "Stylize a content image");
  c_sty->add_option("--content", sty.content)->required();
  auto* o_bank = c_sty->add_option("--bank", sty.bank, "Distilled style bank");
  c_sty->add_option("--caches", sty.caches, "Per-image caches, streamed and fully concatenated")->excludes(o_bank);
  c_sty->add_option("--stats", sty.stats)->required();
  c_sty->add_option("--phi", sty.phi)->required();
  c_sty->add_option("--config", sty.config, "JSON document with stylize settings");
  c_sty->add_option("--out", sty.out)->required();
  c_sty->add_option("--latent-out", sty.latent_out);
  auto* o_bank_lo = c_sty->add_option("--bank-lo", sty.bank_lo, "Low-resolution bank (two-stage)");
  c_sty->add_option("--caches-lo", sty.caches_lo, "Low-resolution caches (two-stage)")->excludes(o_bank_lo);
  c_sty->add_option("--stats-lo", sty.stats_lo, "Low-resolution statistics (two-stage)");
  c_sty->add_option("--seed", sty.seed, "Overrides the config seed");
  add_common(c_sty);

  auto* c_metric = app.add_subcommand("metric", "Evaluation metrics");
  c_metric->require_subcommand(1);
  ChamferArgs ch;
  auto* c_chamfer = c_metric->add_subcommand("chamfer", "Chamfer colour distance between two images");
  c_chamfer->add_option("a", ch.a)->required();
  c_chamfer->add_option("b", ch.b)->required();
  c_chamfer->add_option("--subsample", ch.subsample, "Points per image, 0 = every pixel");
  c_chamfer->add_option("--seed", ch.seed);
  add_common(c_chamfer);
  EvalArgs ev;
  auto* c_eval = c_metric->add_subcommand("eval", "Chamfer over a seeded sample of stylized/style pairs");
  c_eval->add_option("--stylized", ev.stylized)->required();
  c_eval->add_option("--styles", ev.styles)->required();
  c_eval->add_option("--fraction", ev.fraction)->check(CLI::Range(0.0, 1.0));
  c_eval->add_option("--seed", ev.seed);
  c_eval->add_option("--subsample", ev.subsample);
  c_eval->add_option("--csv", ev.csv);
  add_common(c_eval);

  auto* c_cache = app.add_subcommand("cache", "Cache utilities");
  c_cache->require_subcommand(1);
  std::string inspect_path;
  auto* c_inspect = c_cache->add_subcommand("inspect", "Print the index of a cache or bank");
  c_inspect->add_option("path", inspect_path)->required();
  add_common(c_inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "stylebank: error: usage: " << one_line(e.what()) << '\n' << app.help();
    return 2;
  }

  auto logger = spdlog::stderr_color_mt("stylebank_" + std::to_string(reinterpret_cast<std::uintptr_t>(&app)));
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(g.log_level));
  struct DropLogger {
    std::string name;
    ~DropLogger() { spdlog::drop(name); }
  } drop{logger->name()};

  try {
    std::string name;
    for (const auto* sub = app.get_subcommands().front(); sub; ) {
      name += (name.empty() ? "" : " ") + sub->get_name();
      const auto subs = sub->get_subcommands();
      sub = subs.empty() ? nullptr : subs.front();
    }
    Manifest m(name);
    if (*c_invert) cmd_invert(g, inv, m);
    else if (*c_distill) cmd_distill(g, dst, m);
    else if (*c_finetune) cmd_finetune(g, ft, m);
    else if (*c_embed) cmd_embed(g, emb, m);
    else if (*c_avg) cmd_avgimage(g, avg, m);
    else if (*c_sty) cmd_stylize(g, sty, m);
    else if (*c_chamfer) cmd_chamfer(g, ch, m, out);
    else if (*c_eval) cmd_eval(g, ev, m, out);
    else if (*c_inspect) cmd_inspect(inspect_path, m, out);
    if (!g.manifest.empty()) m.write(g.manifest);
    spdlog::info("{} done", name);
    return 0;
  } catch (const InvalidArgument& e) {
    err << "stylebank: error: invalid_argument: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const FormatError& e) {
    err << "stylebank: error: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const NumericError& e) {
    err << "stylebank: error: numeric: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "stylebank: error: io: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "stylebank: error: internal: " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace stylebank::cli
