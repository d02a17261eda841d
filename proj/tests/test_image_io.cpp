#include <cmath>

#include "doctest.h"
#include "test_support.hpp"
#include "uniedit/image_io.hpp"

using namespace uniedit;
using test_support::TempDir;
using test_support::bytes_equal;
using test_support::max_abs_diff;
using test_support::random_tensor;

TEST_CASE("png byte round trip is exact for gray and rgb") {
    TempDir dir("png");
    for (int64_t channels : {int64_t{1}, int64_t{3}}) {
        PngImage img;
        img.height = 16;
        img.width = 16;
        img.channels = channels;
        img.pixels.resize(static_cast<size_t>(16 * 16 * channels));
        for (size_t i = 0; i < img.pixels.size(); ++i) {
            img.pixels[i] = static_cast<uint8_t>((i * 7 + 13) % 256);
        }
        const std::string path = dir.sub("img.png");
        write_png(path, img);
        const PngImage back = read_png(path);
        CHECK(back.height == 16);
        CHECK(back.width == 16);
        CHECK(back.channels == channels);
        CHECK(back.pixels == img.pixels);
    }
}

TEST_CASE("video frames survive a write/read cycle within quantization") {
    TempDir dir("video");
    const Tensor video = random_tensor({3, 3, 8, 8}, 21);
    write_video_frames(dir.str(), video);
    const Tensor back = read_video_frames(dir.str());
    REQUIRE(back.same_shape(video));
    CHECK(max_abs_diff(back, video) <= 1.0f / 255.0f);

    // a second cycle is a fixed point: quantized values round trip exactly
    TempDir dir2("video2");
    write_video_frames(dir2.str(), back);
    const Tensor back2 = read_video_frames(dir2.str());
    CHECK(bytes_equal(back2, back));
}

TEST_CASE("all 256 byte levels round trip through the [-1,1] mapping") {
    TempDir dir("levels");
    PngImage img;
    img.height = 16;
    img.width = 16;
    img.channels = 1;
    img.pixels.resize(256);
    for (int i = 0; i < 256; ++i) img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(i);
    write_png(dir.sub("frame_0000.png"), img);

    const Tensor video = read_video_frames(dir.str());
    REQUIRE(video.shape() == std::vector<int64_t>{1, 3, 16, 16});
    write_video_frames(dir.sub("out"), video);
    const PngImage back = read_png(dir.sub("out") + "/frame_0000.png");
    for (int i = 0; i < 256; ++i) {
        CHECK(back.pixels[static_cast<size_t>(i * 3)] == static_cast<uint8_t>(i));
    }
}

TEST_CASE("temporal subsampling picks floor(i * n / f_out)") {
    TempDir dir("subsample");
    Tensor video({8, 3, 4, 4});
    for (int64_t f = 0; f < 8; ++f) {
        for (int64_t i = 0; i < 3 * 4 * 4; ++i) {
            // distinct gray level per frame: byte 10*f
            video.at(f * 3 * 4 * 4 + i) = static_cast<float>(10 * f) / 255.0f * 2.0f - 1.0f;
        }
    }
    write_video_frames(dir.str(), video);

    const Tensor sub = read_video_frames(dir.str(), 0, 0, 4);
    REQUIRE(sub.dim(0) == 4);
    for (int64_t i = 0; i < 4; ++i) {
        const int64_t expect = i * 8 / 4;  // 0, 2, 4, 6
        CHECK(sub.at(i, 0, 0, 0) ==
              doctest::Approx(static_cast<float>(10 * expect) / 255.0f * 2.0f - 1.0f));
    }
    CHECK_THROWS_AS(read_video_frames(dir.str(), 0, 0, 9), IoError);
}

TEST_CASE("video read errors are specific") {
    TempDir dir("video_err");
    CHECK_THROWS_AS(read_video_frames(dir.str()), IoError);

    write_video_frames(dir.str(), Tensor({2, 3, 4, 4}));
    // frame 1 has a different size than frame 0
    PngImage odd;
    odd.height = 8;
    odd.width = 8;
    odd.channels = 3;
    odd.pixels.assign(8 * 8 * 3, 0);
    write_png(dir.sub("frame_0001.png"), odd);
    CHECK_THROWS_AS(read_video_frames(dir.str()), IoError);
}

TEST_CASE("video read resizes to the requested resolution") {
    TempDir dir("video_resize");
    write_video_frames(dir.str(), random_tensor({2, 3, 8, 8}, 4));
    const Tensor video = read_video_frames(dir.str(), 4, 4);
    CHECK(video.shape() == std::vector<int64_t>{2, 3, 4, 4});
}

TEST_CASE("bilinear resize matches the aligned-centers oracle") {
    const Tensor src = Tensor::from_data({1, 1, 2}, {1.0f, 3.0f});
    const Tensor up = resize_bilinear(src, 1, 4);
    // sample centers: src_x = (x + .5)/2 - .5 = -.25, .25, .75, 1.25
    CHECK(up.at(0) == doctest::Approx(1.0f));
    CHECK(up.at(1) == doctest::Approx(0.75f * 1.0f + 0.25f * 3.0f));
    CHECK(up.at(2) == doctest::Approx(0.25f * 1.0f + 0.75f * 3.0f));
    CHECK(up.at(3) == doctest::Approx(3.0f));

    const Tensor flat = resize_bilinear(Tensor::full({2, 3, 3}, 0.5f), 7, 5);
    CHECK(flat.shape() == std::vector<int64_t>{2, 7, 5});
    for (float v : flat.values()) CHECK(v == doctest::Approx(0.5f));

    const Tensor same = resize_bilinear(src, 1, 2);
    CHECK(max_abs_diff(same, src) == 0.0f);

    CHECK_THROWS_AS(resize_bilinear(Tensor({4}), 2, 2), ShapeError);
}

TEST_CASE("mask frames demand strict binary pixels") {
    TempDir dir("mask");
    Tensor stack({2, 4, 4});
    stack.at(0, 1, 2) = 1.0f;
    stack.at(1, 0, 0) = 1.0f;
    write_mask_frames(dir.str(), stack);
    const Tensor back = read_mask_frames(dir.str());
    CHECK(bytes_equal(back, stack));
    CHECK_THROWS_AS(read_mask_frames(dir.str(), 3), IoError);

    PngImage gray;
    gray.height = 4;
    gray.width = 4;
    gray.channels = 1;
    gray.pixels.assign(16, 0);
    gray.pixels[5] = 127;
    write_png(dir.sub("mask_0001.png"), gray);
    try {
        read_mask_frames(dir.str());
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("127") != std::string::npos);
    }

    Tensor bad({1, 2, 2});
    bad.at(3) = 0.5f;
    CHECK_THROWS_AS(write_mask_frames(dir.sub("bad"), bad), ShapeError);
}

TEST_CASE("pixel/latent adapters zero-fill and drop extra channels") {
    const Tensor video = random_tensor({2, 3, 4, 4}, 9);
    const Tensor latent = pixels_to_latent(video, 5);
    REQUIRE(latent.shape() == std::vector<int64_t>{2, 5, 4, 4});
    for (int64_t f = 0; f < 2; ++f) {
        for (int64_t c = 3; c < 5; ++c) {
            for (int64_t p = 0; p < 16; ++p) CHECK(latent.at(f, c, p / 4, p % 4) == 0.0f);
        }
    }
    CHECK(bytes_equal(latent_to_pixels(latent), video));
    CHECK_THROWS_AS(pixels_to_latent(video, 2), ConfigError);
    CHECK_THROWS_AS(latent_to_pixels(Tensor({2, 2, 4, 4})), ShapeError);
}
