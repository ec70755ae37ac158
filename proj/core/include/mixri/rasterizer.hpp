#pragma once

#include <utility>
#include <vector>

#include "mixri/geometry.hpp"
#include "mixri/image.hpp"
#include "mixri/mesh.hpp"

namespace mixri {

/// One rendered viewpoint: image, depth, object mask, camera.
struct ReferenceView {
  ImageRGB rgb;
  DepthMap depth;
  MaskImage mask;
  Pose pose;
  Intrinsics intrinsics;
};

/// Z-buffered triangle rasterization with perspective-correct depth and flat
/// Lambert shading under a fixed camera-frame light. Occluders write rgb and
/// depth, and clear mask pixels they win, but never set the mask. Throws when
/// the object covers no pixel.
ReferenceView rasterize(const TriMesh& mesh, const Pose& pose, const Intrinsics& K, int width,
                        int height,
                        const std::vector<std::pair<TriMesh, Pose>>& occluders = {});

}  // namespace mixri
