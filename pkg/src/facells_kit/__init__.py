"""facells-kit: stroke-sketch classification and per-point attribution.

Modules:
    sketch     strokes, drawings, (a, b, p) triple encodings, JSONL/SVG io
    vectorize  raster images to stroke drawings (Canny + tracing + RDP)
    ordering   pen-up travel minimization (exact DP and a fast heuristic)
    model      from-scratch bidirectional LSTM classifiers with exact BPTT
    training   attribute tables, experiment plans, staged runs, comparisons
    facells    per-point attribute scores and composite FaCell images
    cli        all of the above as `facells-kit` subcommands
"""

__version__ = "0.1.0"
