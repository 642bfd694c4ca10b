pub mod autodiff;
pub mod cli_io;
pub mod gaussian;
pub mod lambert_w;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod rec_codec;
