fn main() {
    std::process::exit(earlysnn::cli::run(std::env::args_os()));
}
