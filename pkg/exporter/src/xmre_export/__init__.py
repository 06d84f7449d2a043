"""Full-scale feature export for the xmre relation extraction pipeline.

The exporter runs pretrained encoders over a dataset and its evidence
store and writes the results as XMRF feature files that the `xmre`
package loads directly. It talks to `xmre` only through documented
on-disk formats: the JSON-lines dataset, the evidence store layout, and
the XMRF binary container. Nothing here imports `xmre`.
"""

from xmre_export.export import (
    ExportManifest,
    ExportResult,
    SkippedRecord,
    export_image_features,
    export_text_features,
)

__all__ = [
    "ExportManifest",
    "ExportResult",
    "SkippedRecord",
    "export_image_features",
    "export_text_features",
]
