"""Fine-grained pixel correspondence learning for video.

Library layout:
  numerics       float32 tensors, reverse-mode tape, Adam, tensor files
  encoder        conv feature extractor and checkpoints
  correspondence local-correlation probability maps, flow, occlusion
  losses         KL supervision variants, reconstruction, adversarial
  coarse2fine    attention-enhanced coarse matching + learned up-sampler
  data           synthetic pair/clip generator, Lab, dropout, file formats
  inference      recurrent label propagation (points and masks)
  metrics        PCK, delta-average accuracy, J, F, endpoint error
  trainer        stage orchestration and the evaluation harness
  cli            command-line entry point (`vidcorr`)
"""

__version__ = "0.1.0"
