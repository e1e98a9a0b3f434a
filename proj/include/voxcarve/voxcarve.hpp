#pragma once

// Umbrella header for the whole library.

#include "voxcarve/change_detection.hpp"
#include "voxcarve/evaluation.hpp"
#include "voxcarve/geometry.hpp"
#include "voxcarve/io.hpp"
#include "voxcarve/phantom.hpp"
#include "voxcarve/pipeline.hpp"
#include "voxcarve/registration.hpp"
#include "voxcarve/render.hpp"
#include "voxcarve/tsdf_volume.hpp"
