from lrlm.cli import main

main()
