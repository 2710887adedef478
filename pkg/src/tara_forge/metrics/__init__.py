from .grounding import ap_at_iou, ap_at_k, iou, miou, spatial_block, time_block
from .judge import JudgeTally, gpteval, gpteval_corpus, parse_judge_score
from .report import MetricReport, evaluate, render_table, table_rows
from .tara import entity_match, micro_average, score_tara, verdict_correct
from .text import bertscore, bleu, lcs_length, mean_rouge_l, moverscore, rouge_l, tokenize

__all__ = [
    "MetricReport",
    "JudgeTally",
    "ap_at_iou",
    "ap_at_k",
    "bertscore",
    "bleu",
    "entity_match",
    "evaluate",
    "gpteval",
    "gpteval_corpus",
    "iou",
    "lcs_length",
    "mean_rouge_l",
    "micro_average",
    "miou",
    "moverscore",
    "parse_judge_score",
    "render_table",
    "rouge_l",
    "score_tara",
    "spatial_block",
    "table_rows",
    "time_block",
    "tokenize",
    "verdict_correct",
]
