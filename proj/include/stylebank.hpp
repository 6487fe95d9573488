#pragma once

#include "stylebank/attention_cache.hpp"
#include "stylebank/image.hpp"
#include "stylebank/kmeans.hpp"
#include "stylebank/metrics.hpp"
#include "stylebank/norm_stats.hpp"
#include "stylebank/pipeline.hpp"
#include "stylebank/stats.hpp"
#include "stylebank/style_bank.hpp"
#include "stylebank/style_embedding.hpp"
#include "stylebank/tensor_file.hpp"
#include "stylebank/toy_model.hpp"
