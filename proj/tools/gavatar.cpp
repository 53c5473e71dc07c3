// gavatar: command line front end for the avatar codec.
//
// Exit status: 0 ok, 1 runtime failure, 2 bad usage or configuration,
// 3 end-to-end thresholds not met.

#include <gavatar/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>

using namespace gavatar;

namespace {

bool g_verbose = false;

void note(const std::string& msg) {
  if (g_verbose) std::cerr << "[gavatar] " << msg << '\n';
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void add_synth_options(CLI::App* app, SynthConfig& c) {
  app->add_option("--gaussians", c.gaussian_count, "Gaussians in the ground-truth subject")->capture_default_str();
  app->add_option("--frames", c.frame_count, "Frames in the pose sequence")->capture_default_str();
  app->add_option("--views", c.view_count, "Cameras on the ring")->capture_default_str();
  app->add_option("--width", c.width, "Image width")->capture_default_str();
  app->add_option("--height", c.height, "Image height")->capture_default_str();
  app->add_option("--amplitude", c.pose_amplitude, "Pose amplitude in radians")->capture_default_str();
  app->add_option("--vertices", c.prior_vertices, "Toy prior vertex count")->capture_default_str();
  app->add_option("--radius", c.ring_radius, "Camera ring radius in meters")->capture_default_str();
}

void add_fit_options(CLI::App* app, FitConfig& f, LossWeights& w) {
  app->add_option("--iters", f.iterations, "Optimizer iterations")->capture_default_str();
  app->add_option("--prune-interval", f.prune_interval, "Iterations between opacity prunes")->capture_default_str();
  app->add_option("--lambda1", w.lambda1, "Mask term weight")->capture_default_str();
  app->add_option("--lambda2", w.lambda2, "SSIM term weight")->capture_default_str();
}

// Frames come from a dataset directory or a frame file.
std::vector<FrameParams> frames_from(const std::string& dataset, const std::string& frames_file) {
  if (!frames_file.empty()) return load_frames(frames_file);
  return Dataset::load(dataset).frames;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Animated Gaussian avatar codec"};
  app.require_subcommand(1);
  uint64_t seed = 0;
  int threads = 0;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads (default: GAVATAR_THREADS or 1)");
  app.add_flag("-v,--verbose", g_verbose, "Progress on stderr");

  // prior
  auto* prior = app.add_subcommand("prior", "Build the toy articulated prior model");
  int joints = kDefaultJointCount, vertices = 400;
  std::string prior_out;
  prior->add_option("--joints", joints, "Joint count")->capture_default_str();
  prior->add_option("--vertices", vertices, "Vertex count")->capture_default_str();
  prior->add_option("-o,--out", prior_out, "Output .gapm")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "Render a synthetic multi-view dataset");
  SynthConfig sc;
  std::string synth_out, synth_model;
  add_synth_options(synth, sc);
  synth->add_option("--model", synth_model, "Use this prior instead of building one");
  synth->add_option("-o,--out", synth_out, "Dataset directory")->required();

  // fit
  auto* fitc = app.add_subcommand("fit", "Fit a canonical avatar to a dataset's train views");
  FitConfig fc;
  LossWeights lw;
  std::string fit_model, fit_data, fit_out, fit_log;
  int sh_degree = 1;
  add_fit_options(fitc, fc, lw);
  fitc->add_option("--model", fit_model, "Prior model (default: the dataset's)");
  fitc->add_option("--dataset", fit_data, "Dataset directory")->required();
  fitc->add_option("--sh-degree", sh_degree, "SH degree of the fitted avatar")->capture_default_str();
  fitc->add_option("-o,--out", fit_out, "Output .gava")->required();
  fitc->add_option("--loss-log", fit_log, "Per-iteration loss CSV");

  // encode
  auto* enc = app.add_subcommand("encode", "Encode an avatar and its frames into a stream");
  std::string enc_model, enc_avatar, enc_data, enc_frames, enc_out;
  int enc_qp = kProfileCount - 1;
  enc->add_option("--model", enc_model, "Prior model")->required();
  enc->add_option("--avatar", enc_avatar, "Canonical avatar .gava")->required();
  auto* enc_d = enc->add_option("--dataset", enc_data, "Take frames from this dataset");
  auto* enc_f = enc->add_option("--frames", enc_frames, "Take frames from this .gafp file");
  enc_d->excludes(enc_f);
  enc->add_option("--qp", enc_qp, "Quantization profile, 0 (coarse) to 3 (fine)")
      ->check(CLI::Range(0, kProfileCount - 1))
      ->capture_default_str();
  enc->add_option("-o,--out", enc_out, "Output .gavc")->required();

  // decode
  auto* dec = app.add_subcommand("decode", "Decode a stream into an avatar and frames");
  std::string dec_model, dec_in, dec_avatar, dec_frames;
  dec->add_option("--model", dec_model, "Prior model; checked against the stream's hash");
  dec->add_option("-i,--in", dec_in, "Input .gavc")->required();
  dec->add_option("--avatar-out", dec_avatar, "Write the decoded avatar");
  dec->add_option("--frames-out", dec_frames, "Write the decoded frames");

  // render
  auto* ren = app.add_subcommand("render", "Render one frame from one camera");
  std::string ren_model, ren_avatar, ren_stream, ren_frames, ren_cams, ren_out, ren_mask;
  int ren_frame = 0, ren_view = 0;
  ren->add_option("--model", ren_model, "Prior model")->required();
  auto* ren_a = ren->add_option("--avatar", ren_avatar, "Canonical avatar .gava (needs --frames)");
  auto* ren_s = ren->add_option("--stream", ren_stream, "Decode avatar and frames from a .gavc");
  ren_a->excludes(ren_s);
  ren->add_option("--frames", ren_frames, "Frame file .gafp")->needs(ren_a);
  ren->add_option("--cameras", ren_cams, "cameras.json")->required();
  ren->add_option("--frame", ren_frame, "Frame index")->capture_default_str();
  ren->add_option("--view", ren_view, "Camera index")->capture_default_str();
  ren->add_option("-o,--out", ren_out, "Output .ppm")->required();
  ren->add_option("--mask", ren_mask, "Also write the alpha mask .pgm");

  // rd
  auto* rdc = app.add_subcommand("rd", "Rate-distortion sweep over the four profiles on test views");
  std::string rd_data, rd_avatar, rd_out;
  rdc->add_option("--dataset", rd_data, "Dataset directory")->required();
  rdc->add_option("--avatar", rd_avatar, "Fitted avatar .gava")->required();
  rdc->add_option("--out", rd_out, "Output CSV")->required();

  // e2e
  auto* e2e = app.add_subcommand("e2e", "Synthesize, fit, encode, decode and evaluate");
  EndToEndConfig ec;
  ec.synth.frame_count = 10;
  add_synth_options(e2e, ec.synth);
  add_fit_options(e2e, ec.fit, ec.loss);
  e2e->add_option("-o,--out", ec.out_dir, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // --help is a ParseError too
  }
  if (threads > 0) set_thread_count(threads);
  note("threads: " + std::to_string(thread_count()));

  try {
    if (*prior) {
      save_prior(build_toy_prior(seed, joints, vertices), prior_out);
      note("wrote " + prior_out);
    } else if (*synth) {
      sc.seed = seed;
      const PriorModel model = synth_model.empty() ? make_prior(sc) : load_prior(synth_model);
      const CanonicalAvatar gt = make_gt_avatar(model, sc);
      const auto poses = make_pose_sequence(model, sc);
      const auto cams = make_cameras(model, sc);
      const Dataset d = render_dataset(gt, model, poses, cams, synth_out);
      std::cout << "dataset " << synth_out << ": " << poses.size() << " frames x " << cams.size() << " views, "
                << d.train_views.size() << " train / " << d.test_views.size() << " test\n";
    } else if (*fitc) {
      fc.seed = seed;
      const Dataset d = Dataset::load(fit_data);
      const PriorModel model = fit_model.empty() ? d.model : load_prior(fit_model);
      note("loading " + std::to_string(d.frames.size() * d.train_views.size()) + " training samples");
      const auto samples = training_samples(d, d.train_views);
      const FitResult r = fit(model, samples, fc, lw, std::nullopt, sh_degree);
      save_avatar(r.avatar, fit_out);
      if (!fit_log.empty()) write_text(fit_log, loss_csv(r.loss_log));
      const auto [head, tail] = smoothed_loss_ends(r.loss_log);
      std::cout << "fit: " << r.avatar.size() << " gaussians, loss " << head << " -> " << tail << " (window means), "
                << r.prunes.size() << " prune steps\n";
    } else if (*enc) {
      if (enc_data.empty() && enc_frames.empty()) throw ConfigError("encode: give --dataset or --frames");
      const PriorModel model = load_prior(enc_model);
      const auto frames = frames_from(enc_data, enc_frames);
      const AvatarStream s = encode_stream(load_avatar(enc_avatar), frames, model, quant_profile(enc_qp));
      write_stream(s, enc_out);
      uint64_t frame_bytes = 0;
      for (const auto& f : s.frames) frame_bytes += f.size();
      std::cout << "stream " << enc_out << ": " << s.byte_size() << " bytes (header " << kStreamHeaderSize
                << ", canonical " << s.canonical.size() << ", frames " << frame_bytes << " + "
                << kFrameLengthSize * s.frames.size() << " length bytes), "
                << rate_mbps(8ull * s.byte_size(), static_cast<int64_t>(s.frames.size())) << " Mbps total, "
                << temporal_rate(s.frames) << " Mbps temporal\n";
    } else if (*dec) {
      const AvatarStream s = read_stream(dec_in);
      std::optional<PriorModel> model;
      if (!dec_model.empty()) model = load_prior(dec_model);
      const DecodedStream d = decode_stream(s, model ? &*model : nullptr);
      if (!dec_avatar.empty()) save_avatar(d.avatar, dec_avatar);
      if (!dec_frames.empty()) save_frames(d.frames, 3 * s.joint_count, dec_frames);
      std::cout << "decoded " << d.avatar.size() << " gaussians, " << d.frames.size() << " frames\n";
    } else if (*ren) {
      const PriorModel model = load_prior(ren_model);
      CanonicalAvatar avatar;
      std::vector<FrameParams> frames;
      if (!ren_stream.empty()) {
        DecodedStream d = decode_stream(read_stream(ren_stream), &model);
        avatar = std::move(d.avatar);
        frames = std::move(d.frames);
      } else {
        if (ren_avatar.empty() || ren_frames.empty()) throw ConfigError("render: give --stream, or --avatar and --frames");
        avatar = load_avatar(ren_avatar);
        frames = load_frames(ren_frames);
      }
      const auto cams = load_cameras(ren_cams);
      if (ren_frame < 0 || static_cast<size_t>(ren_frame) >= frames.size()) throw ConfigError("render: frame out of range");
      if (ren_view < 0 || static_cast<size_t>(ren_view) >= cams.size()) throw ConfigError("render: view out of range");
      const RenderOutput r = rasterize(deform(avatar, model, frames[static_cast<size_t>(ren_frame)]),
                                       cams[static_cast<size_t>(ren_view)]);
      write_ppm(r.image, ren_out);
      if (!ren_mask.empty()) write_pgm(r.alpha, ren_mask);
      note("wrote " + ren_out);
    } else if (*rdc) {
      const Dataset d = Dataset::load(rd_data);
      const auto views = eval_views(d, d.test_views);
      const auto profiles = default_profiles();
      const auto points = rd_sweep(load_avatar(rd_avatar), d.model, d.frames, views, profiles);
      write_rd_csv(points, rd_out);
      std::cout << rd_csv(points);
    } else if (*e2e) {
      ec.synth.seed = seed;
      ec.fit.seed = seed;
      const EndToEndReport rep = run_end_to_end(ec, g_verbose ? &std::cerr : nullptr);
      std::cout << std::setprecision(6) << "train PSNR " << rep.train_psnr << " dB, test PSNR " << rep.test_psnr
                << " dB, temporal rate " << rep.temporal_rate_mbps << " Mbps, finest vs uncompressed "
                << rep.finest_vs_uncompressed_psnr << " dB\n"
                << rd_csv(rep.rd);
      for (const auto& [name, ok] : rep.checks) std::cout << (ok ? "PASS " : "FAIL ") << name << '\n';
      std::cout << "summary: " << ec.out_dir << "/summary.json\n";
      return rep.passed() ? 0 : 3;
    }
  } catch (const ConfigError& e) {
    std::cerr << "gavatar: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gavatar: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
