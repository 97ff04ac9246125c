//! mmFormer: incomplete-multimodal 3D medical image segmentation.
//!
//! A hybrid convolutional + Transformer segmentation network that stays
//! robust when any subset of the four MRI modalities (FLAIR, T1c, T1, T2)
//! is missing, together with everything needed to train and evaluate it on
//! synthetic multimodal phantoms: a deterministic CPU autodiff engine, Dice
//! losses, Adam, modality-dropout sampling, and a 15-subset evaluation
//! harness.

pub mod tensor;
