#include "uniedit/ti2v.hpp"

#include <algorithm>
#include <cmath>

#include "uniedit/image_io.hpp"

namespace uniedit {

namespace {

constexpr double kPi = 3.14159265358979323846;

int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

int64_t fill_index(int64_t i, int64_t n, BoundaryFill fill) {
    if (i >= 0 && i < n) return i;
    if (fill == BoundaryFill::Edge) return std::clamp<int64_t>(i, 0, n - 1);
    return reflect_index(i, n);
}

}  // namespace

bool CameraFrame::is_identity() const {
    return dx == 0.0f && dy == 0.0f && zoom == 1.0f && rotate_deg == 0.0f;
}

void CameraPath::validate() const {
    if (frames.empty()) throw ConfigError("camera path has no frames");
    if (!frames.front().is_identity()) {
        throw ConfigError("camera path must start with the identity transform");
    }
    for (size_t f = 0; f < frames.size(); ++f) {
        const CameraFrame& t = frames[f];
        if (!(t.zoom > 0.0f)) {
            throw ConfigError("camera zoom must be positive at frame " + std::to_string(f));
        }
        if (!std::isfinite(t.dx) || !std::isfinite(t.dy) || !std::isfinite(t.zoom) ||
            !std::isfinite(t.rotate_deg)) {
            throw ConfigError("camera transform has non-finite parameters at frame " +
                              std::to_string(f));
        }
    }
}

CameraPath pan_path(int64_t frames, float dx_per_frame, float dy_per_frame) {
    if (frames < 1) throw ConfigError("camera path needs at least one frame");
    CameraPath path;
    path.frames.resize(static_cast<size_t>(frames));
    for (int64_t f = 0; f < frames; ++f) {
        path.frames[static_cast<size_t>(f)].dx = static_cast<float>(f) * dx_per_frame;
        path.frames[static_cast<size_t>(f)].dy = static_cast<float>(f) * dy_per_frame;
    }
    return path;
}

Tensor warp_affine(const Tensor& image, const CameraFrame& t, BoundaryFill fill) {
    require_rank(image, 3, "image");
    if (!(t.zoom > 0.0f)) throw ConfigError("camera zoom must be positive");
    if (t.is_identity()) return image;

    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double theta = static_cast<double>(t.rotate_deg) * kPi / 180.0;
    // inverse transform: undo the shift, then the rotation, then the zoom
    const double cos_t = std::cos(-theta), sin_t = std::sin(-theta);
    const double inv_zoom = 1.0 / static_cast<double>(t.zoom);

    Tensor out({c, h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double rx = static_cast<double>(x) - cx - static_cast<double>(t.dx);
            const double ry = static_cast<double>(y) - cy - static_cast<double>(t.dy);
            const double sx = (cos_t * rx - sin_t * ry) * inv_zoom + cx;
            const double sy = (sin_t * rx + cos_t * ry) * inv_zoom + cy;

            const int64_t x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t y0 = static_cast<int64_t>(std::floor(sy));
            const double wx = sx - static_cast<double>(x0);
            const double wy = sy - static_cast<double>(y0);
            const int64_t xa = fill_index(x0, w, fill), xb = fill_index(x0 + 1, w, fill);
            const int64_t ya = fill_index(y0, h, fill), yb = fill_index(y0 + 1, h, fill);
            for (int64_t ci = 0; ci < c; ++ci) {
                const float* plane = image.data() + ci * h * w;
                const double v00 = plane[ya * w + xa], v01 = plane[ya * w + xb];
                const double v10 = plane[yb * w + xa], v11 = plane[yb * w + xb];
                out.at(ci, y, x) = static_cast<float>((1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                                                      wy * ((1.0 - wx) * v10 + wx * v11));
            }
        }
    }
    return out;
}

Tensor pseudo_video(const Tensor& image, const CameraPath& path, BoundaryFill fill) {
    require_rank(image, 3, "image");
    path.validate();
    const int64_t f = static_cast<int64_t>(path.frames.size());
    Tensor video({f, image.dim(0), image.dim(1), image.dim(2)});
    for (int64_t i = 0; i < f; ++i) {
        const Tensor frame = warp_affine(image, path.frames[static_cast<size_t>(i)], fill);
        std::copy(frame.values().begin(), frame.values().end(),
                  video.data() + i * frame.numel());
    }
    return video;
}

Ti2vResult ti2v_generate(const Denoiser& model, const NoiseSchedule& schedule,
                         const Ti2vRequest& req) {
    const DenoiserConfig& cfg = model.config();

    Ti2vResult out;
    if (req.vanilla_video) {
        require_rank(*req.vanilla_video, 4, "vanilla video");
        out.source_video = *req.vanilla_video;
    } else {
        require_rank(req.image, 3, "image");
        if (req.image.dim(0) != 3) {
            throw ConfigError("ti2v expects a 3-channel image, got " +
                              std::to_string(req.image.dim(0)) + " channels");
        }
        CameraPath path = req.path;
        if (path.frames.empty()) path = pan_path(cfg.frames);
        if (static_cast<int64_t>(path.frames.size()) != cfg.frames) {
            throw ConfigError("camera path length " + std::to_string(path.frames.size()) +
                              " does not match the model's " + std::to_string(cfg.frames) +
                              " frames");
        }
        out.source_video = pseudo_video(req.image, path, req.fill);
    }

    EditRequest edit = req.edit;
    edit.mode = EditMode::MotionEdit;
    edit.source_prompt = "";  // stills have no source description
    edit.source_latent = pixels_to_latent(out.source_video, cfg.latent_channels);
    out.result = run_edit(model, schedule, edit);
    return out;
}

}  // namespace uniedit
