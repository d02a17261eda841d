#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "uniedit/image_io.hpp"
#include "uniedit/metrics.hpp"
#include "uniedit/orchestrator.hpp"
#include "uniedit/run_config.hpp"
#include "uniedit/ti2v.hpp"

namespace py = pybind11;
using namespace uniedit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    std::vector<int64_t> shape(static_cast<size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
    Tensor t(std::move(shape));
    std::memcpy(t.data(), a.data(), sizeof(float) * static_cast<size_t>(t.numel()));
    return t;
}

py::array_t<float> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> a(shape);
    std::memcpy(a.mutable_data(), t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
    return a;
}

py::dict stats_dict(const RunStats& s) {
    py::dict d;
    d["content_fired"] = s.content_fired;
    d["structure_fired_edit"] = s.structure_fired_edit;
    d["structure_fired_motion_ref"] = s.structure_fired_motion_ref;
    d["motion_fired"] = s.motion_fired;
    d["masked_sites"] = s.masked_sites;
    d["mask_fallback_fired"] = s.mask_fallback_fired;
    return d;
}

struct Prepared {
    RunConfig rc;
    Denoiser model;
    NoiseSchedule schedule;
};

Prepared prepare(const std::string& config_json) {
    RunConfig rc = parse_run_config(config_json);
    rc.validate();
    Denoiser model = build_denoiser(to_denoiser_config(rc));
    NoiseSchedule schedule = make_schedule(rc.steps);
    return {std::move(rc), std::move(model), std::move(schedule)};
}

py::dict edit_py(const std::string& config_json, const FloatArray& video) {
    Prepared p = prepare(config_json);
    EditRequest req = to_edit_request(p.rc);
    req.source_latent = pixels_to_latent(to_tensor(video), p.rc.model.latent_channels);
    attach_masks(p.rc, p.model, p.schedule, req);
    const EditResult res = run_edit(p.model, p.schedule, req);

    py::dict out;
    out["edited"] = to_array(latent_to_pixels(res.edited));
    out["reconstruction"] = to_array(latent_to_pixels(res.reconstruction));
    if (res.motion_ref) out["motion_ref"] = to_array(latent_to_pixels(*res.motion_ref));
    out["z_T"] = to_array(res.inverted);
    out["stats"] = stats_dict(res.stats);
    return out;
}

py::array_t<float> invert_py(const std::string& config_json, const FloatArray& video) {
    Prepared p = prepare(config_json);
    const Tensor latent = pixels_to_latent(to_tensor(video), p.rc.model.latent_channels);
    const PromptEmbedding null_p = embed_text("", p.rc.model.text_dim, p.rc.text_seed);
    return to_array(ddim_invert(p.model, latent, null_p, p.schedule, {1.0f, null_p}, {},
                                Branch::Reconstruction, p.rc.invert_refine_iters)
                        .latent);
}

py::array_t<float> generate_py(const std::string& config_json, const FloatArray& z_t) {
    Prepared p = prepare(config_json);
    const PromptEmbedding target =
        embed_text(p.rc.target_prompt, p.rc.model.text_dim, p.rc.text_seed);
    const PromptEmbedding uncond =
        embed_text(p.rc.uncond_prompt, p.rc.model.text_dim, p.rc.text_seed);
    const Tensor latent = ddim_sample(p.model, to_tensor(z_t), target, p.schedule,
                                      {p.rc.guidance_scale, uncond})
                              .latent;
    return to_array(latent_to_pixels(latent));
}

py::dict ti2v_py(const std::string& config_json, const FloatArray& image,
                 const std::optional<FloatArray>& vanilla) {
    Prepared p = prepare(config_json);
    Ti2vRequest treq;
    if (vanilla) {
        treq.vanilla_video = to_tensor(*vanilla);
    } else {
        treq.image = resize_bilinear(to_tensor(image), p.rc.height, p.rc.width);
    }
    treq.path =
        pan_path(p.rc.model.frames, p.rc.camera.dx_per_frame, p.rc.camera.dy_per_frame);
    treq.fill = p.rc.boundary_fill();
    treq.edit = to_edit_request(p.rc);
    const Ti2vResult res = ti2v_generate(p.model, p.schedule, treq);

    py::dict out;
    out["source"] = to_array(res.source_video);
    out["edited"] = to_array(latent_to_pixels(res.result.edited));
    out["stats"] = stats_dict(res.result.stats);
    return out;
}

py::dict optical_flow_py(const FloatArray& video) {
    const FlowField flow = optical_flow(to_tensor(video));
    py::list pairs;
    for (const Tensor& p : flow.pairs) pairs.append(to_array(p));
    py::dict out;
    out["pairs"] = pairs;
    out["degenerate"] = flow.degenerate;
    out["mean_magnitude"] = to_array(flow.mean_magnitude());
    return out;
}

}  // namespace

PYBIND11_MODULE(uniedit, m) {
    m.doc() = "three-branch tuning-free video motion/appearance editing engine";
    m.attr("__version__") = "0.1.0";

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const IoError& e) {
            PyErr_SetString(PyExc_OSError, e.what());
        } catch (const ConfigError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ShapeError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const Error& e) {
            PyErr_SetString(PyExc_RuntimeError, e.what());
        }
    });

    m.def("default_config", [](const std::string& mode) {
        return run_config_json(default_run_config(mode));
    },
          py::arg("mode") = "appearance",
          "Full JSON configuration with the defaults for the given mode.");

    m.def("edit", &edit_py, py::arg("config"), py::arg("video"),
          "Runs the three-branch edit on an (F, 3, H, W) clip in [-1, 1]. Returns a dict with "
          "the edited / reconstruction (and, in motion mode, motion_ref) clips, the shared "
          "starting noise z_T and the run stats.");

    m.def("invert", &invert_py, py::arg("config"), py::arg("video"),
          "Null-prompt DDIM inversion of a clip; returns the starting noise latent z_T.");

    m.def("generate", &generate_py, py::arg("config"), py::arg("z_T"),
          "Samples the target prompt from a starting noise latent; returns the clip.");

    m.def("ti2v", &ti2v_py, py::arg("config"), py::arg("image"),
          py::arg("vanilla") = std::nullopt,
          "Animates a (3, H, W) still image under the configured camera path (motion-mode "
          "config); pass `vanilla` to edit a ready-made clip instead.");

    m.def("optical_flow", &optical_flow_py, py::arg("video"),
          "Coarse-to-fine brightness-constancy flow; returns per-pair (H, W, 2) fields.");

    m.def("frame_consistency", [](const FloatArray& video) {
        return frame_consistency(to_tensor(video), RandomProjectionEmbedder{});
    },
          py::arg("video"),
          "Mean adjacent-frame embedding cosine times 100, via the random-projection embedder.");

    m.def("textual_alignment", [](const FloatArray& video, const std::string& prompt) {
        return textual_alignment(to_tensor(video), prompt, RandomProjectionEmbedder{});
    },
          py::arg("video"), py::arg("prompt"),
          "Mean frame-to-prompt embedding cosine times 100, via the random-projection embedder.");
}
