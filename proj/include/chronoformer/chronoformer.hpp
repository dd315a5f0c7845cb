#pragma once

#include "chronoformer/errors.hpp"
#include "chronoformer/rng.hpp"
#include "chronoformer/numeric.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/synthetic.hpp"
#include "chronoformer/embeddings.hpp"
#include "chronoformer/attention.hpp"
#include "chronoformer/model.hpp"
#include "chronoformer/pretrain.hpp"
#include "chronoformer/analysis.hpp"
#include "chronoformer/experiment.hpp"
