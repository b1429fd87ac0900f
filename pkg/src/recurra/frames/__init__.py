"""RGB-D frame ingestion.

Reads frames and keypoint files, back-projects depth and lifts 2D keypoints
to oriented 3D keypoints.
"""
