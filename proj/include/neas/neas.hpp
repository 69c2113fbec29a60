#pragma once

// Umbrella header.

#include "neas/error.hpp"
#include "neas/diffcore.hpp"
#include "neas/encoders.hpp"
#include "neas/fields.hpp"
#include "neas/posecal.hpp"
#include "neas/renderer.hpp"
#include "neas/phantom.hpp"
#include "neas/image_io.hpp"
#include "neas/dataset.hpp"
#include "neas/surface.hpp"
#include "neas/trainer.hpp"
