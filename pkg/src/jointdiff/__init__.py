"""Joint LiDAR range-image and multi-view camera diffusion on synthetic driving scenes."""
