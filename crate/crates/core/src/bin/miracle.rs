fn main() {
    std::process::exit(miracle::cli_io::cli::cli_main(std::env::args_os()));
}
