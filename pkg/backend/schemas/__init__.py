"""
Pydantic schemas for the JSON Lines records exchanged by the CLI tools.
"""

from backend.schemas.records import CandidateRecord, OdomRecord, PlanStepRecord, PolygonRecord, PoseRecord

__all__ = [
    'PoseRecord',
    'OdomRecord',
    'PolygonRecord',
    'CandidateRecord',
    'PlanStepRecord',
]
