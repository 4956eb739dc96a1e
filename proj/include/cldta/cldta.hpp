#pragma once

#include "cldta/augment.hpp"
#include "cldta/checkpoint.hpp"
#include "cldta/config.hpp"
#include "cldta/data_io.hpp"
#include "cldta/dsp.hpp"
#include "cldta/error.hpp"
#include "cldta/eval.hpp"
#include "cldta/gradcore.hpp"
#include "cldta/loss.hpp"
#include "cldta/model.hpp"
#include "cldta/montage.hpp"
#include "cldta/train.hpp"
