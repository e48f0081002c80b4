#include "icdit/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ostream>

#include "icdit/container.hpp"
#include "icdit/dataset.hpp"
#include "icdit/errors.hpp"
#include "icdit/ops.hpp"
#include "icdit/png.hpp"
#include "icdit/rng.hpp"
#include "json.hpp"

namespace icdit {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

fs::path train_dir(const Config& c) { return fs::path(c.paths.dataset_dir) / "train"; }
fs::path eval_dir(const Config& c) { return fs::path(c.paths.dataset_dir) / "eval"; }

NoiseSchedule schedule_of(const Config& c) {
  return make_schedule(c.diffusion.steps, c.diffusion.beta_start, c.diffusion.beta_end);
}

TrainOptions train_options(const Config& c) {
  TrainOptions o;
  o.steps = c.train.steps;
  o.batch_size = c.train.batch_size;
  o.lr = c.train.lr;
  o.lr_final = c.train.lr_final;
  o.clip_norm = c.train.clip_norm;
  o.seed = c.seed;
  o.drop = c.drop;
  o.checkpoint_every = c.train.checkpoint_every;
  return o;
}

std::string sample_name(std::size_t i) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "sample_%06zu.icdt", i);
  return buf;
}

// Conditions for generating item i of the held-out split.
std::vector<SampleConditions> held_out_conditions(const Config& c, const SurrogateEncoders& enc,
                                                  const std::vector<SynthSample>& eval,
                                                  const std::vector<SynthSample>* train, std::size_t n) {
  std::vector<SampleConditions> out;
  for (std::size_t i = 0; i < n; ++i) {
    const SynthSample& s = eval[i];
    const Tensor* appearance = &s.image;
    if (c.sample.embedding_source == EmbeddingSource::reference) {
      if (!train || train->empty()) throw IoError("reference embeddings need the training split");
      // First training image with the same caption, else the same label.
      const SynthSample* ref = nullptr;
      for (const auto& t : *train)
        if (t.label == s.label && t.texture == s.texture) {
          ref = &t;
          break;
        }
      for (const auto& t : *train)
        if (!ref && t.label == s.label) ref = &t;
      appearance = ref ? &ref->image : &(*train)[i % train->size()].image;
    }
    out.push_back(prepare_sample(s, enc, appearance).conditions);
  }
  return out;
}

ModelParams train_only(const Config& c, const SurrogateEncoders& enc, const NoiseSchedule& sched,
                       std::span<const PreparedSample> data, const DropSet& drop, std::vector<double>* losses) {
  TrainOptions o = train_options(c);
  o.drop = drop;
  o.checkpoint_every = 0;
  auto r = train_model(c.model, sched, enc, data, o);
  if (losses) *losses = std::move(r.losses);
  return std::move(r.params);
}

}  // namespace

std::string loss_csv(std::span<const double> losses) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
    out += buf;
  }
  return out;
}

void cmd_gen_data(const Config& c, std::ostream& log) {
  const auto train = gen_dataset(c.data.n_train, split_seed(c.seed, false));
  const auto eval = gen_dataset(c.data.n_eval, split_seed(c.seed, true));
  write_split(train_dir(c), train);
  write_split(eval_dir(c), eval);
  log << "wrote " << train.size() << " train and " << eval.size() << " eval samples to " << c.paths.dataset_dir
      << "\n";
}

TrainResult cmd_train(const Config& c, std::ostream& log, const std::optional<fs::path>& checkpoint) {
  const fs::path ckpt = checkpoint.value_or(fs::path(c.paths.out_dir) / "checkpoint.icdt");
  const SurrogateEncoders enc(c.encoder_params());
  const auto samples = read_split(train_dir(c));
  const auto data = prepare_samples(samples, enc);
  const auto sched = schedule_of(c);
  const auto start = std::chrono::steady_clock::now();
  auto result = train_model(c.model, sched, enc, data, train_options(c),
                            [&](std::size_t step, const ModelParams& p) {
                              save_checkpoint(ckpt, p);
                              log << "step " << step << ": checkpoint written\n";
                            });
  save_checkpoint(ckpt, result.params);
  write_file(fs::path(c.paths.out_dir) / "loss.csv", loss_csv(result.losses));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log << "trained " << result.losses.size() << " steps in " << secs << " s";
  if (!result.losses.empty()) log << ", last loss " << result.losses.back();
  log << "\n";
  return result;
}

void cmd_sample(const Config& c, const SampleRequest& req, std::ostream& log) {
  const fs::path ckpt = req.checkpoint.value_or(fs::path(c.paths.out_dir) / "checkpoint.icdt");
  const fs::path out = req.out_dir.value_or(fs::path(c.paths.out_dir) / "samples");
  const SurrogateEncoders enc(c.encoder_params());
  const ModelParams params = load_checkpoint(ckpt, c.model);
  const auto eval = read_split(eval_dir(c));
  const std::size_t n = req.n.value_or(eval.size());
  if (n == 0 || n > eval.size())
    throw ConfigError("sample: --n must be in 1.." + std::to_string(eval.size()) + " (held-out items)");
  std::vector<SynthSample> train;
  if (c.sample.embedding_source == EmbeddingSource::reference) train = read_split(train_dir(c));
  const auto conds = held_out_conditions(c, enc, eval, &train, n);
  const auto latents = generate_latents(params, enc, schedule_of(c), conds, c.drop, c.seed, c.sample.batch_size);

  fs::create_directories(out);
  std::string manifest;
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img = decode_image(enc, latents[i]);
    save_container(out / sample_name(i), {{"image", img}, {"mask", eval[i].mask}, {"latent", latents[i]}},
                   DType::f64);
    ordered_json j;
    j["index"] = i;
    j["file"] = sample_name(i);
    j["caption"] = eval[i].caption();
    manifest += j.dump() + "\n";
    if (images.size() < 64) images.push_back(std::move(img));
  }
  write_file(out / "manifest.jsonl", manifest);
  write_png(out / "grid.png", image_grid(images, 8));
  log << "wrote " << n << " samples to " << out.string() << "\n";
}

EvalReport cmd_evaluate(const Config& c, const fs::path& generated_dir, const std::optional<fs::path>& report_path,
                        std::ostream& log) {
  const SurrogateEncoders enc(c.encoder_params());
  const auto eval = read_split(eval_dir(c));
  std::vector<Tensor> real, generated, layouts;
  for (const auto& s : eval) real.push_back(s.image);
  for (std::size_t i = 0;; ++i) {
    const fs::path p = generated_dir / sample_name(i);
    if (!fs::exists(p)) break;
    const auto entries = load_container(p);
    generated.push_back(find_entry(entries, "image"));
    layouts.push_back(find_entry(entries, "mask"));
  }
  if (generated.size() < 2) throw IoError("evaluate: need at least 2 samples in " + generated_dir.string());
  const EvalReport report = evaluate_run(real, generated, layouts, enc);
  const fs::path out = report_path.value_or(fs::path(c.paths.out_dir) / "metrics.json");
  write_file(out, report.to_json());
  log << report.to_json();
  return report;
}

std::vector<AblationRow> cmd_ablate(const Config& c, std::ostream& log, std::span<const DropSet> rows) {
  const std::vector<DropSet> all = DropSet::all();
  if (rows.empty()) rows = all;
  const SurrogateEncoders enc(c.encoder_params());
  const auto train = read_split(train_dir(c));
  const auto eval = read_split(eval_dir(c));
  const auto data = prepare_samples(train, enc);
  const auto sched = schedule_of(c);
  const auto conds = held_out_conditions(c, enc, eval, &train, eval.size());
  std::vector<Tensor> real, layouts;
  for (const auto& s : eval) {
    real.push_back(s.image);
    layouts.push_back(s.mask);
  }

  std::vector<AblationRow> out;
  ordered_json table = ordered_json::array();
  std::string csv = "drop,fid,mean_dice,final_loss\n";
  for (const auto& drop : rows) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<double> losses;
    const ModelParams params = train_only(c, enc, sched, data, drop, &losses);
    const auto latents = generate_latents(params, enc, sched, conds, drop, c.seed, c.sample.batch_size);
    std::vector<Tensor> generated;
    for (const auto& z : latents) generated.push_back(decode_image(enc, z));
    const EvalReport report = evaluate_run(real, generated, layouts, enc);
    AblationRow row{drop, report.fid, report.mean_dice, losses.empty() ? 0.0 : losses.back()};
    out.push_back(row);
    ordered_json j;
    j["drop"] = drop.label();
    j["fid"] = row.fid;
    j["mean_dice"] = row.mean_dice;
    j["final_loss"] = row.final_loss;
    table.push_back(j);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", drop.label().c_str(), row.fid, row.mean_dice,
                  row.final_loss);
    csv += buf;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << "drop=" << drop.label() << " fid=" << row.fid << " dice=" << row.mean_dice << " (" << secs << " s)\n";
  }
  write_file(fs::path(c.paths.out_dir) / "ablation.csv", csv);
  write_file(fs::path(c.paths.out_dir) / "ablation.json", table.dump(2) + "\n");
  return out;
}

AnnotateOutcome cmd_annotate(const Config& c, const AnnotateRequest& req, std::ostream& log) {
  const auto train = read_split(train_dir(c));
  const std::size_t g = c.annotate.grid;
  if (train.size() < g * g)
    throw ConfigError("annotate: need " + std::to_string(g * g) + " training samples for the mosaic, have " +
                      std::to_string(train.size()));
  std::vector<Tensor> tiles;
  for (std::size_t i = 0; i < g * g; ++i) tiles.push_back(train[i].image);
  const Tensor mosaic = join_patches(tiles, g * kSynthImageSize, g * kSynthImageSize);

  AgentEndpoint endpoint;
  if (req.endpoint_url) {
    endpoint.kind = AgentEndpoint::Kind::remote;
    endpoint.url = *req.endpoint_url;
    endpoint.timeout_ms = c.annotate.timeout_ms;
    endpoint.max_retries = c.annotate.max_retries;
  }
  const auto agent = make_agent(endpoint);
  PipelineOptions opts;
  opts.policy = c.annotate.skip_errors ? ErrorPolicy::skip : ErrorPolicy::abort;
  opts.parallelism = c.annotate.parallelism;
  opts.aggregator = AggregatorParams::seeded(c.seed);
  auto result = run_pipeline(mosaic, opts, {agent.get(), agent.get(), agent.get()});
  for (const auto& s : result.skipped) log << "skipped " << s << "\n";

  AnnotateOutcome outcome;
  if (req.human_scores) {
    const auto scores = parse_human_scores(read_file(*req.human_scores));
    const std::size_t matched = attach_human_scores(result.records, scores);
    log << "matched " << matched << " human scores\n";
    outcome.agreement = agreement(result.records);
    ordered_json j;
    j["spearman_rho"] = outcome.agreement->spearman_rho;
    j["mean_abs_diff"] = outcome.agreement->mean_abs_diff;
    j["n"] = outcome.agreement->n;
    write_file(fs::path(c.paths.out_dir) / "agreement.json", j.dump(2) + "\n");
    log << j.dump() << "\n";
  }
  const fs::path out = req.out_path.value_or(fs::path(c.paths.out_dir) / "records.jsonl");
  write_file(out, records_to_jsonl(result.records));
  log << "wrote " << result.records.size() << " records to " << out.string() << "\n";
  outcome.records = std::move(result.records);
  outcome.skipped = std::move(result.skipped);
  return outcome;
}

std::map<std::string, GradCheckReport> cmd_gradcheck(const Config& c, std::ostream& log) {
  constexpr double eps = 1e-5;
  constexpr double kGradcheckInitStd = 0.2;
  std::map<std::string, GradCheckReport> out;
  Rng rng(c.seed, 0x67636b);
  auto rand = [&](Shape s) { return Tensor::randn(std::move(s), rng); };
  // Weighted sums keep every output component in play.
  auto check = [&](const std::string& name, auto&& build, std::vector<Tensor> leaves, double fraction = 1.0) {
    auto report = grad_check(build, leaves, eps, fraction, c.seed);
    out[name] = report;
    log << name << ": max rel error " << report.max_rel_error << " over " << report.components << " components\n";
  };

  {
    Tensor a = rand({5, 4}), b = rand({4, 3}), w = rand({5, 3});
    check("matmul", [&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  }
  {
    Tensor x = rand({3, 5}), w = rand({3, 5});
    check("softmax", [&] { return sum(mul(softmax(x), w)); }, {x});
  }
  {
    Tensor x = rand({3, 8}), g = rand({8}), b = rand({8}), w = rand({3, 8});
    check("layer_norm", [&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b});
  }
  {
    Tensor x = rand({4, 6}), w = rand({4, 6});
    check("gelu", [&] { return sum(mul(gelu(x), w)); }, {x});
    check("silu", [&] { return sum(mul(silu(x), w)); }, {x});
  }
  {
    Tensor a = rand({2, 4}), b = rand({3, 4}), w = rand({5, 4});
    check("concat_tokens", [&] {
      const Tensor parts[] = {a, b};
      return sum(mul(concat_tokens(parts), w));
    }, {a, b});
  }
  {
    const std::vector<std::size_t> off = {0, 2, 5};
    Tensor x = rand({5, 4}), sh = rand({2, 4}), sc = rand({2, 4}), gt = rand({2, 4}), r = rand({5, 4}), w = rand({5, 4});
    check("modulate", [&] { return sum(mul(gated_residual(r, modulate(x, sh, sc, off), gt, off), w)); },
          {x, sh, sc, gt, r});
  }

  // Toy geometry: 16x16 crops give a 4x4 latent and 4 image tokens. Zero-
  // initialized tensors are randomized so no path is masked by exact zeros.
  ModelConfig toy;
  toy.depth = 2;
  toy.d_model = 8;
  toy.n_heads = 2;
  toy.latent_h = toy.latent_w = 4;
  toy.steps = 10;
  ModelParams mp = init_model(toy, c.seed);
  randomize_zero_init(mp, c.seed, kGradcheckInitStd);
  const auto& blk = mp.blocks[0];
  {
    const auto& ap = blk.attn[0];
    StreamBatch sa{rand({3, 8}), {0, 3}}, sb{rand({2, 8}), {0, 2}};
    Tensor wa = rand({3, 8}), wb = rand({2, 8});
    check("mm_attention", [&] {
      auto [oa, ob] = mm_attention(sa, sb, ap);
      return add(sum(mul(oa.tokens, wa)), sum(mul(ob.tokens, wb)));
    }, {sa.tokens, sb.tokens, ap.q_a, ap.k_a, ap.v_a, ap.o_a, ap.q_b, ap.k_b, ap.v_b, ap.o_b});
  }
  {
    BlockStreams in{{rand({4, 8}), {0, 4}}, {rand({3, 8}), {0, 3}}, {rand({4, 8}), {0, 4}}, {rand({2, 8}), {0, 2}}};
    Tensor cond = rand({1, 8});
    std::vector<Tensor> leaves = {in.z.tokens, in.text.tokens, in.layout.tokens, in.embedding.tokens, cond};
    for (const auto& [name, t] : mp.named())
      if (name.rfind("blocks.0.", 0) == 0) leaves.push_back(t);
    std::vector<Tensor> w = {rand({4, 8}), rand({3, 8}), rand({4, 8}), rand({2, 8})};
    check("block_forward", [&] {
      const auto o = block_forward(in, cond, blk);
      return add(add(sum(mul(o.z.tokens, w[0])), sum(mul(o.text.tokens, w[1]))),
                 add(sum(mul(o.layout.tokens, w[2])), sum(mul(o.embedding.tokens, w[3]))));
    }, leaves);
  }
  {
    SurrogateEncoderParams ep;
    ep.d_model = toy.d_model;
    const SurrogateEncoders enc(ep);
    const auto sched = make_schedule(toy.steps, 1e-3, 0.2);
    std::vector<SampleConditions> conds;
    DiffusionBatch batch;
    for (const auto& s : gen_dataset(2, c.seed)) {
      SynthSample crop = s;
      crop.image = split_patches(s.image, 16, 16)[0];
      crop.mask = split_patches(s.mask, 16, 16)[0];
      const auto p = prepare_sample(crop, enc);
      conds.push_back(p.conditions);
      batch.z0.push_back(p.latent);
      batch.eps.push_back(Tensor::randn(p.latent.shape(), rng));
      batch.t.push_back(rng.below(toy.steps));
    }
    batch.conditions = make_condition_batch(conds, toy);
    check("denoise_loss", [&] { return denoise_loss(batch, mp, enc, sched); }, mp.trainable(), 0.01);
  }

  double worst = 0.0;
  for (const auto& [name, r] : out) worst = std::max(worst, r.max_rel_error);
  log << "worst: " << worst << (worst < kGradcheckTolerance ? " (pass)" : " (FAIL)") << "\n";
  return out;
}

}  // namespace icdit
