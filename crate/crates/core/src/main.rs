fn main() {
    std::process::exit(attend_gan::cli::run(std::env::args_os()));
}
