#pragma once

#include "augment.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "layers.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "serialize.hpp"
#include "tensor.hpp"
#include "train.hpp"
