pub mod audio_io;
pub mod compress;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod pooling;
pub mod synthdata;
pub mod tensor_nn;
