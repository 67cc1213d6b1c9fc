fn main() {
    std::process::exit(prosody_service::cli::run(std::env::args_os()));
}
