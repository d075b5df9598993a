//! Every chapter of the guide in `book/src`, included as documentation so
//! that `cargo test` runs its code listings. One module per chapter keeps
//! failures traceable to a file.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(tensors, "tensors.md");
chapter!(codec, "codec.md");
chapter!(diffusion, "diffusion.md");
chapter!(conditioning, "conditioning.md");
chapter!(model, "model.md");
chapter!(guidance, "guidance.md");
chapter!(synthetic_data, "synthetic-data.md");
chapter!(metrics, "metrics.md");
chapter!(training, "training.md");
chapter!(cli, "cli.md");
