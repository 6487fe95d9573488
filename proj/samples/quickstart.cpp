// Distills three synthetic style images into one bank and stylizes a
// synthetic content image with it. Writes everything under the directory
// given as the first argument (default: quickstart_out).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "stylebank.hpp"

using namespace stylebank;

namespace {

Image striped_style(int k, std::size_t n) {
  Image im(n, n);
  Rng rng(50 + k);
  const float base[3] = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                         static_cast<float>(rng.uniform())};
  const std::size_t period = 2 + k % 3;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float stripe = ((x + y * (k % 2)) / period) % 2 ? 0.2f : -0.2f;
        const float v = base[c] + stripe * (c == static_cast<std::size_t>(k % 3) ? 1.0f : 0.3f) +
                        0.05f * static_cast<float>(rng.normal());
        im.at(x, y, c) = std::clamp(v, 0.0f, 1.0f);
      }
  return im;
}

Image disc_content(std::size_t n) {
  Image im(n, n);
  const double centre = 0.5 * static_cast<double>(n), radius = 0.3 * static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) - centre, dy = static_cast<double>(y) - centre;
      const bool inside = dx * dx + dy * dy < radius * radius;
      for (std::size_t c = 0; c < 3; ++c) im.at(x, y, c) = inside ? 0.8f - 0.2f * c : 0.2f + 0.1f * c;
    }
  return im;
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "quickstart_out";
  std::filesystem::create_directories(out / "styles");
  const std::size_t px = 16, steps = 10;
  const ToyModel model = build_toy_model(ModelConfig{}.seed);

  std::vector<Image> styles;
  std::vector<CacheReader> caches;
  for (int k = 0; k < 3; ++k) {
    styles.push_back(striped_style(k, px));
    const auto name = "style" + std::to_string(k);
    write_ppm(styles.back(), out / "styles" / (name + ".ppm"));
    const auto inv = invert_style(model, styles.back(), steps);
    write_cache(inv.entries, out / (name + ".skvc"), static_cast<std::uint64_t>(k));
    caches.push_back(open_cache(out / (name + ".skvc")));
  }

  const StyleBank bank = distill(caches, KPolicy::single_image(), 7);
  write_bank(bank, out / "bank.skvb");
  std::printf("bank: %zu entries, %llu payload bytes (one cache: %llu)\n", bank.entries.size(),
              static_cast<unsigned long long>(bank.payload_bytes()),
              static_cast<unsigned long long>(caches.front().payload_bytes()));

  const auto adapter = init_projection(kEmbeddingDim, model.config().dim, 1);
  const StyleEmbedding phi = embed_styles(styles, adapter);
  const AverageImage avg = generate_average_image(model, phi, steps, 3, px / 2, px / 2);

  const Image content = disc_content(px);
  write_ppm(content, out / "content.ppm");
  StylizeConfig cfg;
  cfg.steps = steps;
  const StylizeResult res = stylize(model, content, BankSource(bank), avg.stats, phi, cfg);
  write_ppm(res.image, out / "content__stylized.ppm");

  double mean = 0.0;
  for (const auto& s : styles) mean += chamfer_color(res.image, s);
  std::printf("mean colour chamfer to the styles: %.5f\n", mean / static_cast<double>(styles.size()));
  std::printf("wrote %s\n", (out / "content__stylized.ppm").string().c_str());
}
