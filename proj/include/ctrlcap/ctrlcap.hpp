#pragma once

#include "ctrlcap/checkpoint.hpp"
#include "ctrlcap/corpus_gen.hpp"
#include "ctrlcap/data.hpp"
#include "ctrlcap/decoder.hpp"
#include "ctrlcap/error.hpp"
#include "ctrlcap/evaluate.hpp"
#include "ctrlcap/lexicon.hpp"
#include "ctrlcap/metrics.hpp"
#include "ctrlcap/model.hpp"
#include "ctrlcap/optim.hpp"
#include "ctrlcap/rng.hpp"
#include "ctrlcap/sorter.hpp"
#include "ctrlcap/tensor.hpp"
#include "ctrlcap/training.hpp"
