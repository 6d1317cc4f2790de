"""Local embedding service that serves the offline encoder over HTTP.

Speaks the same wire format as ``EmbeddingClient``; useful for exercising the
remote path without any external dependency. Run with
``uvicorn grouprec.embedserver:app --port 8808``.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .profiler import OfflineEncoder, parse_profile_text


class EmbeddingRequest(BaseModel):
    model: str = "profile-embedding"
    input: list[str]


def create_app(encoder: OfflineEncoder | None = None) -> FastAPI:
    encoder = encoder or OfflineEncoder()
    api = FastAPI(title="profile embedding stub")

    @api.post("/v1/embeddings")
    def embeddings(req: EmbeddingRequest):
        data = []
        for i, text in enumerate(req.input):
            try:
                vec = encoder.encode(parse_profile_text(text))
            except ValueError as e:
                raise HTTPException(status_code=422, detail=f"input {i}: {e}") from None
            data.append({"index": i, "embedding": [float(x) for x in np.asarray(vec)]})
        return {"model": req.model, "data": data}

    return api


app = create_app()
