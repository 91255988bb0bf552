#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stark/geometry.hpp"
#include "stark/tensor.hpp"

namespace stark {

// Planar RGB float image, values in [0,1], layout [3][height][width].
struct Image {
  int width = 0, height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<size_t>(3) * w * h, 0.f) {}

  float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
};

// Maps between a square crop and its source image. ox/oy is the image
// position of the crop's origin; scale is source pixels per crop pixel.
struct CropTransform {
  double ox = 0, oy = 0;
  double scale = 1;
  int out_size = 0;

  BoxF crop_to_image(const BoxF& b) const {
    return BoxF{ox + b.x * scale, oy + b.y * scale, b.w * scale, b.h * scale};
  }
  BoxF image_to_crop(const BoxF& b) const {
    return BoxF{(b.x - ox) / scale, (b.y - oy) / scale, b.w / scale, b.h / scale};
  }
};

// Square crop of side area_factor*sqrt(w*h) centered on the box, bilinearly
// resampled to out_size; out-of-frame taps read the frame's mean color.
std::pair<Image, CropTransform> crop_resize(const Image& frame, const BoxF& box, double area_factor,
                                            int out_size);

Image flip_horizontal(const Image& img);
BoxF flip_box_horizontal(const BoxF& b, double width);

// Scales all values by factor, then clamps to [0,1].
Image adjust_brightness(const Image& img, double factor);

// Snaps every value to the nearest 1/255 step (what an 8-bit file round-trip
// would produce).
void quantize_255(Image& img);

// Binary 8-bit PPM (P6).
void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

// Binary 8-bit PGM (P5); values are scaled so the max maps to 255.
void save_pgm(const std::vector<double>& vals, int width, int height, const std::string& path);

// [3,h,w] tensor view of an image / batch slot filler for [B,3,h,w] tensors.
Tensor image_to_tensor(const Image& img);
void copy_image_into_batch(Tensor& batch, int slot, const Image& img);

}  // namespace stark
