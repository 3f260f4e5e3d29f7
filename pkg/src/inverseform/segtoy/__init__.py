"""Desk-scale boundary-aware segmentation: shapes dataset, model and training loop."""

from .model import (SegModel, decode_seg_checkpoint, encode_seg_checkpoint, inference_cost,
                    init_seg_model, load_seg_checkpoint, save_seg_checkpoint, seg_forward, seg_infer)
from .shapes import (ShapesSample, class_palette, gen_shapes, load_dataset, render_sample,
                     save_dataset, stack_dataset)
from .train import (SegTrainConfig, dump_metrics_jsonl, evaluate, load_metrics_jsonl,
                    predict_labels, train_seg)
