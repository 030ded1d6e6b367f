"""Efficient video-language post-pretraining at desk scale.

A CLIP-style dual encoder is adapted to video by dropping most patches
during training, masking text for a cross-attention decoder, freezing the
text encoder, and averaging checkpoints along the run. Everything runs on a
small reverse-mode tensor core over numpy with named, replayable RNG streams.
"""

from .tensor import Tape, Tensor, backward
from .gradcheck import grad_check
from .rng import RngStreams, stream_rng
from .masking import (DropMask, MaskedText, apply_drop, full_mask, keep_count,
                      mask_count, mask_text, sample_drop_mask)
from .params import ParamTree, arrays_digest, load_arrays, save_arrays
from .synthdata import (ANSWER_VOCAB, COLORS, DIRECTIONS, MOTIONS,
                        QUESTION_TYPES, SHAPES, VOCAB, VOCAB_SIZE,
                        DatasetManifest, SceneSpec, TokenizedText, VideoClip,
                        caption_for, detokenize, gen_batch, gen_sample,
                        gen_scene, make_manifest, qa_for_scene, read_manifest,
                        render_clip, tokenize, write_manifest)
from .model import (ModelConfig, TextFeatures, VisionFeatures, cross_decode,
                    encode_text, encode_video, encode_video_clips,
                    init_params, load_checkpoint, load_model_config,
                    param_template, patchify, save_checkpoint,
                    save_model_config, set_text_frozen)
from .objectives import (DualEmbedding, LossBreakdown, TrainConfig,
                         embed_pair, info_nce, lr_at, mlm_loss)
from .trainer import (AdamState, adam_update, assemble_batch, run_training,
                      train_step)
from .wiseft import (CheckpointSeries, WiseFtSchedule, alg1_indices,
                     classic_wise_ft, ensemble, wise_ft_online)
from .evaltasks import (McResult, MlmResult, RetrievalResult,
                        SimilarityMatrix, VqaResult, bench_drop,
                        direction_mc_eval, make_qa_set, mlm_accuracy,
                        multiple_choice, retrieval_eval,
                        retrieval_from_manifest, vqa_features, vqa_train_eval,
                        zero_shot_classify)

__version__ = "0.1.0"
