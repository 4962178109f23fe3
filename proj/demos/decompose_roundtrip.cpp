// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.
//
// Minimal tour of the first pipeline stage: synthesize one shadow scene,
// fit the decomposition pair to it for a few hundred steps, and write the
// reflectance, illumination and reconstruction layers as PNGs. Runs in a
// few seconds on a laptop CPU and needs no dataset or checkpoints.

#include <filesystem>
#include <iostream>

#include "umbra/decomposition.hpp"
#include "umbra/image.hpp"
#include "umbra/optim.hpp"
#include "umbra/synth.hpp"

using namespace umbra;

int main() {
    const std::string out_dir = "demo_out";
    std::filesystem::create_directories(out_dir);

    Rng rng(2718);
    const Image base = synth_base(64, 64, rng);
    const ShadowSample scene = synth_shadow(base, rng, ShadowParams{}, "demo");
    save_png(out_dir + "/input_shadow.png", scene.shadow);
    save_png(out_dir + "/input_mask.png", scene.mask);

    DecompConfig cfg;
    cfg.base_channels = 8;
    DecompositionNet net_s(cfg, rng);
    DecompositionNet net_sf(cfg, rng);

    const ad::Var image = ad::constant(image_to_tensor(scene.shadow));
    const ad::Var freev = ad::constant(image_to_tensor(scene.shadow_free));
    const ad::Var mask = ad::constant(image_to_tensor(scene.mask));

    std::vector<ad::Var> params = net_s.params().vars();
    for (const auto& v : net_sf.params().vars()) params.push_back(v);
    optim::Adam opt(params);

    const int steps = 300;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < steps; ++step) {
        const auto out_s = net_s.forward(image, mask);
        const auto out_sf = net_sf.forward_shadow_free(freev);
        const auto parts = loss_decomposition_total(out_s.reflectance, out_s.illumination,
                                                    image, out_sf.reflectance,
                                                    out_sf.illumination, freev);
        last = parts.total->value[0];
        if (step == 0) first = last;
        ad::backward(parts.total);
        opt.step(optim::lr_at(step, steps, 2e-3));
        ad::zero_grad(params);
        if (step % 50 == 0) std::cout << "step " << step << "  loss " << last << "\n";
    }
    std::cout << "loss " << first << " -> " << last << " over " << steps << " steps\n";

    ad::NoGradGuard guard;
    const auto out = net_s.forward(image, mask);
    save_png(out_dir + "/reflectance.png", tensor_to_image(out.reflectance->value));
    save_png(out_dir + "/illumination.png", tensor_to_image(out.illumination->value));
    const ad::Var recon = ad::mul(out.reflectance, out.illumination);
    save_png(out_dir + "/reconstruction.png", tensor_to_image(recon->value));

    const double err = ad::l1_mean(recon, image)->value[0];
    std::cout << "reconstruction L1 " << err << "\nlayers written to " << out_dir << "/\n";
    return err < 0.2 ? 0 : 1;
}
