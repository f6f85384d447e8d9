#pragma once

// Everything: tensors, models, data pipeline, training and inference.

#include "texrect/tensor.hpp"
#include "texrect/ops.hpp"
#include "texrect/conv.hpp"
#include "texrect/norm.hpp"
#include "texrect/attention.hpp"
#include "texrect/optim.hpp"
#include "texrect/module.hpp"
#include "texrect/rng.hpp"
#include "texrect/parallel.hpp"
#include "texrect/linalg.hpp"
#include "texrect/geometry.hpp"
#include "texrect/image.hpp"
#include "texrect/textures.hpp"
#include "texrect/degradation.hpp"
#include "texrect/latent_transformer.hpp"
#include "texrect/codec.hpp"
#include "texrect/diffusion.hpp"
#include "texrect/denoiser.hpp"
#include "texrect/rectifier.hpp"
#include "texrect/metrics.hpp"
#include "texrect/config.hpp"
#include "texrect/checkpoint.hpp"
#include "texrect/pipeline.hpp"
