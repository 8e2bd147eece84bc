// Trains the bundled tiny backbone from scratch on procedurally generated shape images, with
// every base weight trainable. The result stands in for a generic pretrained promptable
// segmenter; it never sees the blob fixture used by the acceptance run.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "cellprompt/model.hpp"
#include "cellprompt/runtime.hpp"
#include "cellprompt/synthetic.hpp"
#include "cellprompt/training.hpp"

using namespace cellprompt;

int main(int argc, char** argv) {
  CLI::App app{"Pretrain the bundled tiny backbone on synthetic shapes"};
  std::filesystem::path out = bundled_backbone_path();
  std::filesystem::path init;
  int images = 40000;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 25;
  int save_every = 250;
  double dice_weight = 1.0;
  SamplerConfig sampler;
  sampler.max_positive = 10;
  sampler.max_negative = 5;
  app.add_option("--out", out, "Backbone checkpoint to write")->capture_default_str();
  app.add_option("--init", init, "Start from this backbone instead of a random initialisation");
  app.add_option("--images", images, "Number of generated training images")->capture_default_str();
  app.add_option("--batch", batch, "Images per optimizer step")->capture_default_str();
  app.add_option("--lr", lr, "Peak learning rate of the one-cycle schedule")->capture_default_str();
  app.add_option("--seed", seed, "Seed for initialisation and data")->capture_default_str();
  app.add_option("--log-every", log_every, "Optimizer steps between log lines")->capture_default_str();
  app.add_option("--save-every", save_every, "Optimizer steps between checkpoints")->capture_default_str();
  app.add_option("--max-positive", sampler.max_positive, "Positive prompts per image")->capture_default_str();
  app.add_option("--max-negative", sampler.max_negative, "Negative prompts per image")->capture_default_str();
  app.add_option("--dice-weight", dice_weight, "Weight of the soft Dice term on positive prompts")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    tune_allocator();
    auto model = init.empty() ? std::make_unique<PromptableSegmenter>(BackboneConfig::tiny(), seed) : load_backbone(init);
    model->set_base_trainable(true);
    const int resolution = model->config().input_resolution;

    TrainConfig schedule;
    schedule.max_lr = lr;
    schedule.pct_start = 0.05;
    schedule.final_div_factor = 40.0;
    const std::int64_t total_steps = (images + batch - 1) / batch;
    nn::AdamW optimizer(model->trainable_tensors(), {0.9f, 0.999f, 1e-8f, 0.01f});
    optimizer.zero_grad();
    Rng dropout_rng = Rng::derive(seed, 1);
    const ForwardContext ctx{true, &dropout_rng};
    const AugmentationConfig augmentation;

    const auto started = std::chrono::steady_clock::now();
    double window_loss = 0.0;
    int window_items = 0;
    for (std::int64_t step = 0; step < total_steps; ++step) {
      const int in_step = static_cast<int>(std::min<std::int64_t>(batch, images - step * batch));
      for (int j = 0; j < in_step; ++j) {
        Rng rng = Rng::derive(seed, 1000 + static_cast<std::uint64_t>(step * batch + j));
        auto rec = augment(synthetic::shape_image(rng, resolution, "shape"), augmentation, rng);
        const auto samples = sample_prompts(*rec.labels, sampler, rng);
        if (samples.empty()) continue;
        std::vector<Point> points;
        nn::ByteMatrix targets(static_cast<Eigen::Index>(samples.size()),
                               static_cast<Eigen::Index>(resolution) * resolution);
        for (std::size_t i = 0; i < samples.size(); ++i) {
          points.push_back(samples[i].point);
          const auto px = samples[i].target_mask.pixels().values();
          std::copy(px.begin(), px.end(), targets.row(static_cast<Eigen::Index>(i)).data());
        }
        const auto emb = model->encode_image(rec.image, ctx);
        const auto res = model->decode(emb, points, ctx);
        auto loss = prompt_loss(*model, res, targets, samples, NegativeLossMode::both);
        // Pixel-mean BCE barely rewards small instances; Dice on positives keeps masks from
        // collapsing to background.
        std::vector<nn::real> dice_w(samples.size(), 0);
        const auto positives = std::count_if(samples.begin(), samples.end(),
                                             [](const auto& s) { return s.polarity == Polarity::positive; });
        for (std::size_t i = 0; i < samples.size(); ++i)
          if (samples[i].polarity == Polarity::positive)
            dice_w[i] = static_cast<nn::real>(dice_weight / static_cast<double>(positives));
        if (positives > 0 && dice_weight > 0)
          loss = nn::add(loss, nn::weighted_sum(nn::upsampled_dice_rows(res.low_res_logits, model->mask_upsample_table(),
                                                                        targets),
                                                dice_w));
        nn::backward(nn::scale(loss, static_cast<nn::real>(1.0 / in_step)));
        window_loss += loss.item();
        ++window_items;
      }
      const double rate = lr_at_step(step, total_steps, schedule);
      optimizer.step(static_cast<nn::real>(rate));
      optimizer.zero_grad();

      const bool last = step + 1 == total_steps;
      if ((step + 1) % log_every == 0 || last) {
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        std::printf("step %lld/%lld images %lld loss %.4f lr %.2e elapsed %.0fs\n", static_cast<long long>(step + 1),
                    static_cast<long long>(total_steps), static_cast<long long>((step + 1) * batch),
                    window_items ? window_loss / window_items : 0.0, rate, elapsed);
        std::fflush(stdout);
        window_loss = 0.0;
        window_items = 0;
      }
      if ((step + 1) % save_every == 0 || last) save_backbone(*model, out);
    }
    std::cout << "wrote " << out.string() << " fingerprint " << model->fingerprint() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "pretrain: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
