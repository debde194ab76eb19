fn main() {
    std::process::exit(latent_atlas_cli::run(std::env::args_os()));
}
