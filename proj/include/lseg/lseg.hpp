#pragma once

#include "lseg/autograd.hpp"
#include "lseg/checkpoint.hpp"
#include "lseg/config.hpp"
#include "lseg/dataset.hpp"
#include "lseg/error.hpp"
#include "lseg/evaluate.hpp"
#include "lseg/gradcheck.hpp"
#include "lseg/gradcheck_suite.hpp"
#include "lseg/interp.hpp"
#include "lseg/kernels.hpp"
#include "lseg/layers.hpp"
#include "lseg/metrics.hpp"
#include "lseg/model.hpp"
#include "lseg/nifti.hpp"
#include "lseg/optim.hpp"
#include "lseg/pgm.hpp"
#include "lseg/preprocess.hpp"
#include "lseg/rng.hpp"
#include "lseg/tensor.hpp"
#include "lseg/train.hpp"
