import cdbuffer
import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="cdbuffer",
    version=cdbuffer.__version__,
    description="Test-time adaptation with subtractive and additive channel buffers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.7',
    install_requires=[
        'numpy>=1.17',
        'scipy',
        'pandas',
        'tqdm',
        'click',
        'crc32c',
        'tabulate'
    ],
    entry_points={
        'console_scripts': ['cdbuffer=cdbuffer.cli:run'],
    },
)
