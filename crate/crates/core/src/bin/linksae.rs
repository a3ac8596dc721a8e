fn main() {
    std::process::exit(linksae::cli::dispatch(std::env::args_os()));
}
